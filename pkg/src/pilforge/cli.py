"""``pilforge`` command line.

Every option can also come from a ``key = value`` file given with
``--config``; keys are the long option names with dashes or underscores.
Explicit flags win over the file. The fully resolved configuration is logged
to standard error before a command runs.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
failure (a NaN/inf guard tripped).
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import core, envmap, mc, pil, recover, sg, smae
from . import tensor as T
from .brdf import BrdfParams
from .errors import NumericalError, ParseError, PilforgeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REQUIRED = object()
IMAGE_SUFFIXES = (".pfm", ".hdr", ".pic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _optional(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def conv(text: str):
        return None if str(text).strip().lower() in ("", "none") else kind(text)

    conv.__name__ = getattr(kind, "__name__", "value")
    return conv


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class Opt:
    name: str
    kind: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None


COMMON = [
    Opt("config", str, None, "key=value file supplying defaults for any option"),
    Opt("seed", int, 0, "root random seed"),
    Opt("threads", _optional(int), None, "worker threads (default: PILFORGE_THREADS or all cores)"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "make-envs": ("write procedural environment maps (sky gradient plus area lights)", [
        Opt("count", int, 16, "number of maps"),
        Opt("out", str, REQUIRED, "output directory"),
        Opt("width", int, 128, "map width"),
        Opt("height", int, 64, "map height"),
        Opt("format", str, "pfm", "file format", ("pfm", "hdr")),
    ]),
    "prefilter": ("pre-integrate an environment map at one roughness", [
        Opt("env", str, REQUIRED, "input map (.hdr or .pfm)"),
        Opt("roughness", float, REQUIRED, "GGX roughness in [0, 1]"),
        Opt("spp", int, 256, "samples per texel"),
        Opt("width", _optional(int), None, "output width (default: input width)"),
        Opt("height", _optional(int), None, "output height (default: input height)"),
        Opt("out", str, REQUIRED, "output map (.pfm or .hdr)"),
    ]),
    "bake-lut": ("bake the split-sum B0/B1 table", [
        Opt("size", int, 32, "table resolution N (N x N)"),
        Opt("spp", int, 1024, "samples per entry"),
        Opt("out", str, REQUIRED, "output PFM (R = B0, G = B1)"),
    ]),
    "render": ("render the sphere scene", [
        Opt("mode", str, REQUIRED, "renderer", ("mc", "split", "sg", "pil")),
        Opt("scene", _optional(str), None, "scene file (default: bundled demo scene)"),
        Opt("env", _optional(str), None, "environment map for mc and split"),
        Opt("sg", _optional(str), None, "SG lobe file for sg"),
        Opt("pil", _optional(str), None, "network weights for pil"),
        Opt("latent", _optional(str), None, "latent for pil: an NPIL file or a latent name stored in the weights"),
        Opt("lut", _optional(str), None, "B0/B1 table (default: bake one)"),
        Opt("spp", int, 128, "samples per pixel for mc, per texel for split prefiltering"),
        Opt("out", str, REQUIRED, "output image (.png, .hdr or .pfm)"),
    ]),
    "train-pil": ("train the pre-integrated lighting network", [
        Opt("envdir", str, REQUIRED, "directory of training maps"),
        Opt("steps", int, 2000, "optimisation steps"),
        Opt("batch", int, 8, "environments per step"),
        Opt("lr", float, 5e-4, "Adam learning rate"),
        Opt("lr_final", _optional(float), None, "cosine-decay target learning rate"),
        Opt("samples", int, 8192, "random (direction, roughness) pairs per environment and step"),
        Opt("map_samples", _optional(int), None, "roughness-0 texels per environment and step (default: all)"),
        Opt("pyramid_spp", int, 128, "prefiltering samples per texel for the training pyramids"),
        Opt("out", str, REQUIRED, "output weights (NPIL)"),
    ]),
    "train-smae": ("train the BRDF autoencoder", [
        Opt("steps", int, 5000, "optimisation steps"),
        Opt("dataset", _optional(str), None, "CSV of 7-column BRDF samples (default: procedural)"),
        Opt("samples", int, 20000, "procedural dataset size"),
        Opt("batch", int, 256, "batch size"),
        Opt("lr", float, 1e-4, "Adam learning rate"),
        Opt("lambda1", float, 0.01, "adversarial weight"),
        Opt("lambda2", float, 0.01, "cyclic weight"),
        Opt("lambda3", float, 0.001, "smoothness weight"),
        Opt("m", int, 64, "interpolated codes per pair"),
        Opt("pairs", _optional(int), None, "interpolation pairs per step (default: batch)"),
        Opt("grid", _optional(str), None, "optional PNG of the decoded latent grid"),
        Opt("out", str, REQUIRED, "output weights (NPIL)"),
    ]),
    "fit-illum": ("recover illumination from a sphere image", [
        Opt("backend", str, REQUIRED, "illumination model", ("mc", "sg", "pil")),
        Opt("target", str, REQUIRED, "target HDR image (.hdr or .pfm)"),
        Opt("scene", _optional(str), None, "scene file (default: bundled demo scene)"),
        Opt("steps", int, 1000, "optimisation steps"),
        Opt("lr", _optional(float), None, "learning rate (default per backend)"),
        Opt("pil", _optional(str), None, "network weights for the pil backend"),
        Opt("lut", _optional(str), None, "B0/B1 table (default: bake one)"),
        Opt("mc_spp", int, 8, "samples per pixel per step for mc"),
        Opt("final_spp", int, 128, "samples per pixel for the final mc render"),
        Opt("env_width", int, 128, "recovered map width for mc"),
        Opt("env_height", int, 64, "recovered map height for mc"),
        Opt("artifact", _optional(str), None, "where to save the recovered illumination"),
        Opt("render_out", _optional(str), None, "re-render PNG (default: next to the report)"),
        Opt("timing", _bool, True, "write wall-clock seconds (off writes 0.000)"),
        Opt("report", str, REQUIRED, "output CSV"),
    ]),
    "decompose": ("jointly recover BRDF texture and per-image illumination", [
        Opt("images", str, REQUIRED, "directory of K >= 2 HDR renders"),
        Opt("scene", _optional(str), None, "scene file (default: bundled demo scene)"),
        Opt("pil", str, REQUIRED, "network weights"),
        Opt("smae", str, REQUIRED, "autoencoder weights"),
        Opt("lut", _optional(str), None, "B0/B1 table (default: bake one)"),
        Opt("steps", int, 1000, "optimisation steps"),
        Opt("out", _optional(str), None, "directory for recovered textures"),
        Opt("timing", _bool, True, "write wall-clock seconds (off writes 0.000)"),
        Opt("report", str, REQUIRED, "output CSV"),
    ]),
    "compare": ("merge recovery reports into one CSV and a side-by-side panel", [
        Opt("reports", str, REQUIRED, "comma-separated report CSVs"),
        Opt("csv", _optional(str), None, "merged CSV (default: standard output)"),
        Opt("out", str, REQUIRED, "output PNG panel"),
    ]),
    "bench": ("time batched network queries against SG shading", [
        Opt("pil", _optional(str), None, "network weights (default: freshly initialised)"),
        Opt("n", int, 1_000_000, "queries per timing"),
        Opt("repeats", int, 3, "timing repetitions"),
        Opt("out", str, REQUIRED, "output CSV"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pilforge", description="Pre-integrated lighting toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for o in COMMON + opts:
            flag = "--" + o.name.replace("_", "-")
            extra = {"choices": o.choices} if o.choices else {}
            default = "required" if o.default is REQUIRED else o.default
            p.add_argument(flag, dest=o.name, type=o.kind, default=None, help=f"{o.help} [{default}]", **extra)
    return parser


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    raw = Path(path).read_bytes()
    offset = 0
    for line in raw.split(b"\n"):
        text = line.split(b"#", 1)[0].strip()
        if text:
            if b"=" not in text:
                raise ParseError(f"{path}: expected key = value", offset)
            k, v = text.split(b"=", 1)
            out[k.strip().decode().replace("-", "_")] = v.strip().decode()
        offset += len(line) + 1
    return out


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    opts = {o.name: o for o in COMMON + COMMANDS[command][1]}
    values = {k: (None if o.default is REQUIRED else o.default) for k, o in opts.items()}
    if args.config:
        for k, v in read_config(args.config).items():
            if k not in opts or k == "config":
                raise UsageError(f"{command}: unknown config key {k!r}")
            o = opts[k]
            try:
                val = o.kind(v)
            except ValueError as e:
                raise UsageError(f"{command}: bad value for {k!r}: {e}") from None
            if o.choices and val not in o.choices:
                raise UsageError(f"{command}: {k} must be one of {', '.join(o.choices)}")
            values[k] = val
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    missing = [k for k, o in opts.items() if o.default is REQUIRED and values[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return values


def log_config(command: str, cfg: dict) -> None:
    items = " ".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    print(f"pilforge {command}: {items}", file=sys.stderr)


# -- helpers --------------------------------------------------------------

SCENE_KEYS = {
    "width": int, "height": int, "camera": str, "fov_deg": float, "distance": float,
    "azimuth_deg": float, "elevation_deg": float, "extent": float, "background": str,
    "diffuse": str, "specular": str, "roughness": float,
}


def _rgb(text: str) -> np.ndarray:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise ValueError(f"expected 1 or 3 numbers, got {text!r}")
    return np.array(vals)


def demo_scene_path() -> Path:
    return Path(str(resources.files("pilforge") / "data" / "demo_scene.cfg"))


def load_scene(path=None) -> mc.SphereScene:
    path = path or demo_scene_path()
    cfg = read_config(path)
    kw: dict[str, Any] = {}
    mat = {"diffuse": "0", "specular": "1", "roughness": 0.2}
    for k, v in cfg.items():
        if k not in SCENE_KEYS:
            raise ParseError(f"{path}: unknown scene key {k!r}")
        try:
            val = SCENE_KEYS[k](v)
        except ValueError:
            raise ParseError(f"{path}: bad value for {k!r}") from None
        if k in mat:
            mat[k] = val
        else:
            kw[k] = val
    try:
        kw["material"] = BrdfParams.uniform(_rgb(mat["diffuse"]), _rgb(mat["specular"]), float(mat["roughness"]))
        return mc.SphereScene(**kw)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None


def _lut(path) -> mc.BrdfLut:
    return mc.BrdfLut.load(path) if path else mc.bake_lut()


def _write_render(img: np.ndarray, path: str) -> None:
    if Path(path).suffix.lower() == ".png":
        envmap.write_png(envmap.tone_map(img), path)
    else:
        envmap.write_image(img, path)


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ParseError(f"no .pfm or .hdr files in {directory}")
    return files


def _latent(spec: str, weights_latents) -> np.ndarray:
    p = Path(spec)
    if p.is_file():
        tensors = T.load_weights(p)
        for arr in tensors.values():
            if arr.ndim == 1:
                return arr
        raise ParseError(f"{spec}: no rank-1 tensor found")
    if weights_latents is not None and spec in weights_latents.names:
        return weights_latents.code(spec)
    raise FileNotFoundError(f"latent {spec!r} is neither a file nor a stored latent name")


# -- commands -------------------------------------------------------------


def cmd_make_envs(cfg) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg["count"]):
        env = envmap.procedural(core.derive_seed(cfg["seed"], i), cfg["width"], cfg["height"])
        envmap.save(env, out / f"env{i:03d}.{cfg['format']}", "radiance_hdr" if cfg["format"] == "hdr" else "pfm")


def cmd_prefilter(cfg) -> None:
    env = envmap.load(cfg["env"])
    if not 0.0 <= cfg["roughness"] <= 1.0:
        raise UsageError("prefilter: --roughness must lie in [0, 1]")
    out = mc.prefilter(env, cfg["roughness"], cfg["width"], cfg["height"], cfg["spp"], cfg["seed"], cfg["threads"])
    envmap.save(out, cfg["out"])


def cmd_bake_lut(cfg) -> None:
    if cfg["size"] < 16:
        raise UsageError("bake-lut: --size must be at least 16")
    mc.bake_lut(cfg["size"], cfg["spp"], cfg["seed"]).dump(cfg["out"])


def cmd_render(cfg) -> None:
    scene = load_scene(cfg["scene"])
    mode = cfg["mode"]
    env = envmap.load(cfg["env"]) if cfg["env"] else None
    if mode in ("mc", "split") and env is None:
        raise UsageError(f"render: --mode {mode} needs --env")
    if mode == "mc":
        img = mc.render_mc(scene, env, cfg["spp"], cfg["seed"], cfg["threads"])
    elif mode == "split":
        pyr = mc.build_pyramid(env, cfg["spp"], cfg["seed"], threads=cfg["threads"])
        img = mc.render_split(scene, pyr, _lut(cfg["lut"]), env, cfg["threads"])
    elif mode == "sg":
        if not cfg["sg"]:
            raise UsageError("render: --mode sg needs --sg")
        img = recover.render_sg(scene, sg.SgIllumination.load(cfg["sg"]), _lut(cfg["lut"]))
    else:
        if not cfg["pil"] or not cfg["latent"]:
            raise UsageError("render: --mode pil needs --pil and --latent")
        model, latents = pil.load(cfg["pil"])
        img = recover.render_pil(scene, model, _latent(cfg["latent"], latents), _lut(cfg["lut"]))
    _write_render(img, cfg["out"])


def cmd_train_pil(cfg) -> None:
    files = _image_files(cfg["envdir"])
    envs = [envmap.load(f) for f in files]
    pyrs = [mc.build_pyramid(e, cfg["pyramid_spp"], core.derive_seed(cfg["seed"], "pyramid", i), threads=cfg["threads"])
            for i, e in enumerate(envs)]
    tc = pil.TrainConfig(steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"], lr_final=cfg["lr_final"],
                         samples=cfg["samples"], map_samples=cfg["map_samples"], seed=cfg["seed"])
    with T.check_finite():
        res = pil.train(envs, pyrs, tc, names=[f.stem for f in files])
    pil.save(res.model, cfg["out"], res.latents)


def cmd_train_smae(cfg) -> None:
    data = smae.load_dataset(cfg["dataset"]) if cfg["dataset"] else smae.sample_brdfs(cfg["seed"], cfg["samples"])
    sc = smae.SmaeConfig(steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"],
                         lambdas=(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]), m=cfg["m"], pairs=cfg["pairs"], seed=cfg["seed"])
    with T.check_finite():
        res = smae.train(data, sc)
    smae.save(res.model, cfg["out"])
    if cfg["grid"]:
        grid = smae.data_grid(res.model, data)
        tile = smae.grid_triptych(res.model, grid)
        envmap.write_png(np.repeat(np.repeat(tile, 8, axis=0), 8, axis=1), cfg["grid"])


def cmd_fit_illum(cfg) -> None:
    scene = load_scene(cfg["scene"])
    target = envmap.read_image(cfg["target"])
    backend = "mc_direct" if cfg["backend"] == "mc" else cfg["backend"]
    model = init = None
    if backend == "pil":
        if not cfg["pil"]:
            raise UsageError("fit-illum: --backend pil needs --pil")
        model, latents = pil.load(cfg["pil"])
        init = latents.mean() if latents is not None else None
    task = recover.RecoveryTask(target, scene, backend, steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                                lut=None if backend == "mc_direct" else _lut(cfg["lut"]), model=model, init=init,
                                env_width=cfg["env_width"], env_height=cfg["env_height"], mc_spp=cfg["mc_spp"],
                                final_spp=cfg["final_spp"], threads=cfg["threads"])
    rep = recover.fit_illumination(task)
    row = rep.csv_row(cfg["timing"])
    row["steps"] = str(cfg["steps"])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(recover.CSV_COLUMNS) + ["steps"], lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    Path(cfg["report"]).write_text(buf.getvalue())
    render_out = cfg["render_out"] or str(Path(cfg["report"]).with_suffix(".png"))
    envmap.write_png(recover.montage([rep], models={"pil": model}), render_out)
    if cfg["artifact"]:
        art = rep.artifact
        if isinstance(art, envmap.EnvironmentMap):
            envmap.save(art, cfg["artifact"])
        elif isinstance(art, sg.SgIllumination):
            art.save(cfg["artifact"])
        else:
            T.save_weights({"latent": art}, cfg["artifact"])


def cmd_decompose(cfg) -> None:
    scene = load_scene(cfg["scene"])
    files = _image_files(cfg["images"])
    images = [envmap.read_image(f) for f in files]
    model, latents = pil.load(cfg["pil"])
    prior = smae.load(cfg["smae"])
    init_light = None if latents is None else np.tile(latents.mean(), (len(images), 1))
    rep = recover.joint_decompose(images, scene, model, prior, steps=cfg["steps"], seed=cfg["seed"],
                                  lut=_lut(cfg["lut"]), init_light=init_light)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value"])
    w.writerow(["images", len(images)])
    w.writerow(["steps", cfg["steps"]])
    w.writerow(["psnr_db", f"{rep.psnr_db:.4f}"])
    w.writerow(["final_loss", f"{rep.losses[-1]:.6g}"])
    w.writerow(["seconds", f"{rep.seconds:.3f}" if cfg["timing"] else "0.000"])
    Path(cfg["report"]).write_text(buf.getvalue())
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        envmap.write_png(rep.texture(slice(0, 3)), out / "diffuse.png")
        envmap.write_png(rep.texture(slice(3, 6)), out / "specular.png")
        envmap.write_png(np.repeat(rep.texture(slice(6, 7)), 3, axis=-1), out / "roughness.png")
        T.save_weights({"brdf_latents": rep.brdf_latents, "light_latents": rep.light_latents}, out / "latents.npil")


def cmd_compare(cfg) -> None:
    paths = [p.strip() for p in cfg["reports"].split(",") if p.strip()]
    if not paths:
        raise UsageError("compare: --reports is empty")
    rows, tiles = [], []
    for p in paths:
        file_rows = recover.read_report_csv(p)
        if not file_rows or any(c not in file_rows[0] for c in recover.CSV_COLUMNS):
            raise ParseError(f"{p}: not a recovery report")
        rows.extend(file_rows)
        png = Path(p).with_suffix(".png")
        if png.is_file():
            from PIL import Image

            tiles.append(np.asarray(Image.open(png).convert("RGB"), dtype=np.float64) / 255.0)
        else:
            tiles.append(np.full((64, 64, 3), 0.5))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(recover.CSV_COLUMNS), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if cfg["csv"]:
        Path(cfg["csv"]).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    h = max(t.shape[0] for t in tiles)
    panel = np.concatenate([np.pad(t, ((0, h - t.shape[0]), (0, 2), (0, 0))) for t in tiles], axis=1)
    envmap.write_png(panel, cfg["out"])


BENCH_COLUMNS = ("repeat", "n", "pil_seconds", "sg_seconds", "pil_over_sg", "pil_flops_per_query",
                 "sg_flops_per_query", "paper_pil_ms", "paper_sg_ms")


def cmd_bench(cfg) -> None:
    model = pil.load(cfg["pil"])[0] if cfg["pil"] else pil.PilModel(cfg["seed"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in range(cfg["repeats"]):
        rep = pil.benchmark(model, cfg["n"], seed=cfg["seed"])
        w.writerow([r, rep["n"], f"{rep['pil_seconds']:.4f}", f"{rep['sg_seconds']:.4f}", f"{rep['ratio']:.4f}",
                    rep["pil_flops_per_query"], rep["sg_flops_per_query"], pil.PAPER_PIL_MS, pil.PAPER_SG_MS])
    Path(cfg["out"]).write_text(buf.getvalue())


HANDLERS = {
    "make-envs": cmd_make_envs, "prefilter": cmd_prefilter, "bake-lut": cmd_bake_lut, "render": cmd_render,
    "train-pil": cmd_train_pil, "train-smae": cmd_train_smae, "fit-illum": cmd_fit_illum,
    "decompose": cmd_decompose, "compare": cmd_compare, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("pilforge: a command is required (see --help)")
        cfg = resolve(args.command, args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError) as e:
        print(f"pilforge: {e}", file=sys.stderr)
        return EXIT_DATA
    log_config(args.command, cfg)
    if cfg.get("threads") is not None:
        os.environ["PILFORGE_THREADS"] = str(cfg["threads"])
    from threadpoolctl import threadpool_limits

    try:
        # BLAS stays single-threaded; parallelism comes from our own fixed-size chunks
        with threadpool_limits(limits=1):
            HANDLERS[args.command](cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as e:
        print(f"pilforge: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PilforgeError, OSError, ValueError, KeyError) as e:
        print(f"pilforge: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
