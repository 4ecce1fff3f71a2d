"""Command-line entry points covering every pipeline without the service.

Every run writes its canonical request.json beside the outputs so it can be
replayed exactly (`skipforge edit --from-request run/request.json`). Flags
map 1:1 onto the plan's JSON keys. Exit codes: 2 for validation problems,
3 for runtime failures. All flags also read SKIPFORGE_* env vars.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import pipeline, synthdata
from .canonical import canonical_dumps
from .checkpoint import load_bundle
from .injection import ChannelMaskSpec, InjectionError, InjectionPlan, InjectionWindow
from .scheduler import SamplerConfig
from .unet import UNetConfig

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _parse_taps(text: str):
    taps = []
    for part in text.split(","):
        part = part.strip()
        taps.append(part if part == "h" else int(part))
    return tuple(taps)


def _parse_window(text: str) -> InjectionWindow:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2:
        raise click.UsageError(f"--window needs 't_end,t_start', got {text!r}")
    return InjectionWindow(parts[0], parts[1])


def _mask_from_flags(altern, ratio) -> ChannelMaskSpec:
    if altern is not None and ratio is not None:
        raise click.UsageError("--altern and --ratio are mutually exclusive")
    if altern is not None:
        return ChannelMaskSpec("period", altern)
    if ratio is not None:
        return ChannelMaskSpec("ratio", ratio)
    return ChannelMaskSpec("full")


def _cond_json(text: str) -> dict:
    shape, fg, bg = synthdata.parse_cond(text)
    return pipeline.cond_json(shape, fg, bg)


def _write_outputs(out: Path, request: dict, images: dict, report=None, montage_img=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "request.json").write_text(canonical_dumps(request))
    for name, img in images.items():
        pipeline.save_png(img, out / f"{name}.png")
    if report is not None:
        (out / "metrics.json").write_text(report.to_json())
    if montage_img is not None:
        montage_img.save(out / "montage.png")


def _run_request(checkpoint: str, request: dict, out: Path, image_dir: Path = None):
    bundle = load_bundle(checkpoint)

    def resolver(image_id):
        base = image_dir if image_dir else Path(".")
        return pipeline.load_png(base / image_id)

    images, report, montage_img = pipeline.execute_request(bundle, request, image_resolver=resolver)
    _write_outputs(out, request, images, report, montage_img)
    for name, img in sorted(images.items()):
        click.echo(f"{name}: {pipeline.image_hash(img)[:16]}")
    click.echo(f"metrics: {report.to_json()}")
    click.echo(f"outputs in {out}")


@click.group(context_settings={"auto_envvar_prefix": "SKIPFORGE"})
def cli():
    """Desk-scale skip-injection diffusion engine."""


@cli.command()
@click.option("--preset", type=click.Choice(["smoke", "desk"]), default=None,
              help="smoke: untrained-size sanity model; desk: full desk-scale training")
@click.option("--epochs", type=int, default=None)
@click.option("--dataset-size", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--channels", type=str, default=None, help="4 comma-separated block widths")
@click.option("--parallel/--reference", default=False,
              help="parallel drops single-threaded bitwise reproducibility")
@click.option("--resume-from", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True, help="checkpoint output path (.ckpt)")
def train(preset, epochs, dataset_size, batch_size, lr, seed, channels, parallel, resume_from, out):
    """Train the conditional denoiser (and its metric classifier)."""
    unet_cfg = UNetConfig()
    tc = synthdata.TrainConfig(seed=seed, deterministic=not parallel)
    if preset == "smoke":
        unet_cfg = UNetConfig(block_channels=(8, 12, 16, 20), time_embed_dim=32, cond_embed_dim=16)
        tc = synthdata.TrainConfig(epochs=1, batch_size=32, dataset_size=64, seed=seed,
                                   deterministic=not parallel, classifier_epochs=1)
    elif preset == "desk":
        # sized to finish within roughly an hour on a small multicore CPU
        unet_cfg = UNetConfig(block_channels=(16, 32, 48, 64), time_embed_dim=96, cond_embed_dim=48)
        tc = synthdata.TrainConfig(epochs=36, batch_size=64, dataset_size=8192, seed=seed,
                                   deterministic=not parallel)
    if channels:
        unet_cfg = UNetConfig(
            block_channels=tuple(int(c) for c in channels.split(",")),
            time_embed_dim=unet_cfg.time_embed_dim, cond_embed_dim=unet_cfg.cond_embed_dim,
        )
    overrides = {k: v for k, v in [("epochs", epochs), ("dataset_size", dataset_size),
                                   ("batch_size", batch_size), ("learning_rate", lr)] if v is not None}
    if overrides:
        from dataclasses import replace
        tc = replace(tc, **overrides)
    path = synthdata.train(unet_cfg, tc, out, resume_from=resume_from)
    click.echo(f"checkpoint written to {path}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--cond", "cond_text", type=str, required=True, help="shape/fg/bg")
@click.option("--steps", type=int, default=50)
@click.option("--cfg", type=float, default=7.5)
@click.option("--out", type=click.Path(), default="out/generate")
def generate(checkpoint, seed, cond_text, steps, cfg, out):
    """Sample one image from noise under a class condition."""
    from .scheduler import sample

    bundle = load_bundle(checkpoint)
    cond = pipeline.cond_from_json(_cond_json(cond_text))
    sampler = SamplerConfig(num_steps=steps, cfg_scale=cfg)
    z = pipeline.seed_noise(seed, bundle.config)
    img, _ = sample(bundle.model, z, cond, sampler, bundle.schedule)
    out = Path(out)
    request = {"checkpoint": Path(checkpoint).stem, "mode": "generate", "seed": seed,
               "cond": _cond_json(cond_text), "sampler": {"num_steps": steps, "cfg_scale": cfg, "eta": 0.0}}
    _write_outputs(out, request, {"sample": img[0]})
    click.echo(f"sample: {pipeline.image_hash(img[0])[:16]}  -> {out}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--image", type=click.Path(exists=True), required=True)
@click.option("--cond", "cond_text", type=str, required=True)
@click.option("--steps", type=int, default=50)
@click.option("--out", type=click.Path(), default="out/invert")
def invert(checkpoint, image, cond_text, steps, out):
    """DDIM-invert an image and report the reconstruction round trip."""
    import numpy as np
    from . import metrics
    from .scheduler import ddim_invert, sample

    bundle = load_bundle(checkpoint)
    cond = pipeline.cond_from_json(_cond_json(cond_text))
    x = pipeline.load_png(image).unsqueeze(0)
    traj = ddim_invert(bundle.model, x, cond, steps, bundle.schedule)
    z = traj[-1]
    recon, _ = sample(bundle.model, z, cond, SamplerConfig(num_steps=steps, cfg_scale=1.0), bundle.schedule)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "z_T.npy", z.numpy())
    request = {"checkpoint": Path(checkpoint).stem, "mode": "invert", "image": str(image),
               "cond": _cond_json(cond_text), "sampler": {"num_steps": steps, "cfg_scale": 1.0, "eta": 0.0}}
    _write_outputs(out, request, {"reconstruction": recon[0], "input": x[0]})
    click.echo(f"round-trip PSNR: {metrics.psnr(recon, x):.2f} dB  -> {out}")


def _edit_options(f):
    for opt in reversed([
        click.option("--checkpoint", type=click.Path(exists=True), required=True),
        click.option("--seed", type=int, default=0),
        click.option("--image", type=click.Path(exists=True), default=None,
                     help="edit a real image instead of a seeded generation"),
        click.option("--cond-a", type=str, default="circle/red/solid-blue", help="source shape/fg/bg"),
        click.option("--cond-b", type=str, default="square/red/solid-blue", help="target shape/fg/bg"),
        click.option("--taps", type=str, default="4,5"),
        click.option("--window", type=str, default="400,900"),
        click.option("--gamma", type=float, default=0.75),
        click.option("--altern", type=int, default=None, help="period-k channel alternation"),
        click.option("--ratio", type=float, default=None, help="ratio-r channel alternation"),
        click.option("--noise-source", type=click.Choice(["shared_random", "inverted_a", "inverted_b"]),
                     default="shared_random"),
        click.option("--steps", type=int, default=50),
        click.option("--cfg", type=float, default=7.5),
        click.option("--out", type=click.Path(), default="out/edit"),
    ]):
        f = opt(f)
    return f


def _build_request(mode, checkpoint, seed, image, cond_a, cond_b, taps, window, gamma,
                   altern, ratio, noise_source, steps, cfg) -> dict:
    plan = InjectionPlan(
        taps=_parse_taps(taps),
        window=_parse_window(window),
        gamma=gamma,
        mask=_mask_from_flags(altern, ratio),
        noise_source=noise_source,
    )
    source = {"cond": _cond_json(cond_a)}
    if image is not None:
        source["image_id"] = str(image)
        mode = "edit_real" if mode == "edit_generated" else mode
    else:
        source["seed"] = seed
    return {
        "checkpoint": Path(checkpoint).stem,
        "mode": mode,
        "source": source,
        "target_cond": _cond_json(cond_b),
        "plan": plan.to_json(),
        "sampler": {"num_steps": steps, "cfg_scale": cfg, "eta": 0.0},
    }


@cli.command()
@_edit_options
@click.option("--from-request", type=click.Path(exists=True), default=None,
              help="replay a stored request.json (overrides other flags)")
def edit(checkpoint, seed, image, cond_a, cond_b, taps, window, gamma, altern, ratio,
         noise_source, steps, cfg, out, from_request):
    """Record under cond A, inject into a cond-B run; also the replay entry."""
    if from_request:
        request = json.loads(Path(from_request).read_text())
        pipeline.validate_request(request)
    else:
        request = _build_request("edit_generated", checkpoint, seed, image, cond_a, cond_b,
                                 taps, window, gamma, altern, ratio, noise_source, steps, cfg)
    _run_request(checkpoint, request, Path(out), image_dir=Path("."))


@cli.command()
@_edit_options
def style(checkpoint, seed, image, cond_a, cond_b, taps, window, gamma, altern, ratio,
          noise_source, steps, cfg, out):
    """Style transfer: cond B names the style class (defaults: g=0.65, altern 15)."""
    ctx = click.get_current_context()
    if ctx.get_parameter_source("gamma").name == "DEFAULT":
        gamma = 0.65
    if altern is None and ratio is None:
        altern = 15
    request = _build_request("style_transfer", checkpoint, seed, image, cond_a, cond_b,
                             taps, window, gamma, altern, ratio, noise_source, steps, cfg)
    _run_request(checkpoint, request, Path(out), image_dir=Path("."))


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--cond-a", type=str, default="circle/red/solid-blue")
@click.option("--cond-b", type=str, default="square/red/solid-blue")
@click.option("--taps-axis", type=str, default="4;4,5", help="tap sets separated by ';'")
@click.option("--windows", type=str, default="0,1000;400,900;400,800")
@click.option("--gammas", type=str, default="0,0.75,1,1.5")
@click.option("--masks", type=str, default="none;10;20", help="'none', period k, or 'r<ratio>'")
@click.option("--steps", type=int, default=50)
@click.option("--cfg", type=float, default=7.5)
@click.option("--workers", type=int, default=1)
@click.option("--out", type=click.Path(), default="out/sweep")
def sweep(checkpoint, seed, cond_a, cond_b, taps_axis, windows, gammas, masks, steps, cfg, workers, out):
    """Hyperparameter sweep; emits the schema-stable results.csv."""
    def parse_mask(text):
        text = text.strip()
        if text == "none":
            return ChannelMaskSpec("full")
        if text.startswith("r"):
            return ChannelMaskSpec("ratio", float(text[1:]))
        return ChannelMaskSpec("period", int(text))

    grid = pipeline.SweepGrid(
        taps_axis=tuple(_parse_taps(t) for t in taps_axis.split(";")),
        windows=tuple(_parse_window(w) for w in windows.split(";")),
        gammas=tuple(float(g) for g in gammas.split(",")),
        masks=tuple(parse_mask(m) for m in masks.split(";")),
    )
    request = _build_request("edit_generated", checkpoint, seed, None, cond_a, cond_b,
                             "4,5", "400,900", 1.0, None, None, "shared_random", steps, cfg)
    bundle = load_bundle(checkpoint)
    csv_text, rows = pipeline.run_sweep(bundle, request, grid, workers=workers)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(csv_text)
    (out / "request.json").write_text(canonical_dumps({"base": request, "grid": grid.to_json()}))
    click.echo(f"{len(rows)} rows -> {out / 'results.csv'}")


@cli.command("group-sweep")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--cond-a", type=str, default="circle/red/solid-blue")
@click.option("--cond-b", type=str, default="square/red/solid-blue")
@click.option("--steps", type=int, default=50)
@click.option("--cfg", type=float, default=7.5)
@click.option("--out", type=click.Path(), default="out/group_sweep")
def group_sweep_cmd(checkpoint, seed, cond_a, cond_b, steps, cfg, out):
    """Inject each skip group (and the h tap) separately; emit the montage."""
    request = _build_request("group_sweep", checkpoint, seed, None, cond_a, cond_b,
                             "4,5", "0,1000", 1.0, None, None, "shared_random", steps, cfg)
    _run_request(checkpoint, request, Path(out))


@cli.command("export-figures")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice(["group-sweep", "modulation"]), default="group-sweep")
@click.option("--seed", type=int, default=0)
@click.option("--cond-a", type=str, default="circle/red/solid-blue")
@click.option("--cond-b", type=str, default="square/red/solid-blue")
@click.option("--steps", type=int, default=50)
@click.option("--cfg", type=float, default=7.5)
@click.option("--out", type=click.Path(), default="out/figures")
def export_figures(checkpoint, kind, seed, cond_a, cond_b, steps, cfg, out):
    """Render labeled figure montages from standard runs."""
    bundle = load_bundle(checkpoint)
    sampler = SamplerConfig(num_steps=steps, cfg_scale=cfg)
    ca = pipeline.cond_from_json(_cond_json(cond_a))
    cb = pipeline.cond_from_json(_cond_json(cond_b))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "group-sweep":
        res = pipeline.group_sweep(bundle, seed, ca, cb, sampler)
        res.montage.save(out / "group_sweep.png")
        click.echo(f"montage -> {out / 'group_sweep.png'}")
        return
    # modulation strip: gamma 0 .. 1 at the default taps, full window
    from .injection import inject_run, record_run
    from .scheduler import sample as run_sample

    z = pipeline.seed_noise(seed, bundle.config)
    _, cache = record_run(bundle.model, z, ca, sampler, bundle.schedule, (4, 5))
    baseline, _ = run_sample(bundle.model, z, cb, sampler, bundle.schedule)
    tiles = [("baseline", baseline[0])]
    for gamma in (0.25, 0.5, 0.75, 1.0):
        plan = InjectionPlan(taps=(4, 5), window=InjectionWindow(0, 1000), gamma=gamma,
                             mask=ChannelMaskSpec("full"))
        img = inject_run(bundle.model, z, cb, sampler, bundle.schedule, cache, plan)
        tiles.append((f"gamma={gamma:g}", img[0]))
    pipeline.montage(tiles, f"modulation sweep seed={seed}").save(out / "modulation.png")
    click.echo(f"montage -> {out / 'modulation.png'}")


@cli.command()
@click.option("--port", type=int, default=8787)
@click.option("--store", type=click.Path(), default="runs")
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(), default="checkpoints")
@click.option("--workers", type=int, default=1)
@click.option("--ui-dir", type=click.Path(), default="frontend/web")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def serve(port, store, checkpoint_dir, workers, ui_dir, config_path):
    """Run the HTTP job service (serves the web UI when built)."""
    from .service import ServiceConfig, serve as run_serve

    cfg = ServiceConfig.load(config_path)
    if config_path is None:
        cfg.port, cfg.store_root, cfg.checkpoint_dir, cfg.workers, cfg.ui_dir = (
            port, store, checkpoint_dir, workers, ui_dir,
        )
    run_serve(cfg)


def main():
    try:
        cli(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(EXIT_VALIDATION)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(EXIT_VALIDATION)
    except (ValueError, InjectionError, pipeline.PipelineError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except Exception as exc:  # runtime failures
        click.echo(f"runtime error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
