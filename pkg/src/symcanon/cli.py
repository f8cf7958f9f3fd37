"""Command-line pipeline around the library.

Every command resolves its settings (defaults < config file < explicit
flags), stamps artifacts with a short hash of the resolved settings, and is
deterministic for a fixed seed — rerunning a command reproduces its CSV and
JSON outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .alignment import AlignMode, align
from .autoencoder import (
    AeConfig,
    canonicalize,
    encode_net,
    history_to_csv,
    load_ae,
    save_ae,
    train,
)
from .interp import (
    barrier,
    barrier_curve,
    classifier_loss,
    curve_from_csv,
    curve_to_csv,
    inr_mse_loss,
)
from .metagraph import GmnVariant
from .nets import (
    GLYPH_CLASSES,
    Activation,
    Arch,
    FormatError,
    checkpoint_meta,
    load_checkpoint,
    load_idx,
    network_from_dict,
    network_to_dict,
    render_inr,
    save_checkpoint,
    synth_class_data,
    synth_glyphs,
    train_inr,
)
from .symmetry import ScaleDomain, apply, perturb, sample, save_transform
from .tensor import AdamState

_SKIP_CONFIG_KEYS = {"func", "config"}
# the hash identifies the experiment: output destinations and worker counts
# do not change any computed value, so they stay out of it
_UNHASHED_KEYS = {"out", "out_dir", "result_out", "transform_out",
                  "history_out", "latent", "jobs"}


def _config_hash(cfg: dict) -> str:
    hashable = {k: v for k, v in cfg.items() if k not in _UNHASHED_KEYS}
    blob = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _resolved_config(args: argparse.Namespace, command: str) -> dict:
    cfg = {"command": command}
    for key, val in sorted(vars(args).items()):
        if key in _SKIP_CONFIG_KEYS or key.startswith("_") or key == "command":
            continue
        cfg[key] = val
    return cfg


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Config-file values fill in whatever flags were left at their default."""
    path = getattr(args, "config", None)
    if not path:
        return
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise FormatError("config file must hold a JSON object")
    valid = {k for k in vars(args) if not k.startswith("_") and k != "func"}
    unknown = set(data) - valid
    if unknown:
        raise FormatError(f"config file has unknown keys: {sorted(unknown)}")
    for key, val in data.items():
        if getattr(args, key) == parser.get_default(key):
            setattr(args, key, val)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like 16x16, got {text!r}")
    return h, w


def _default_jobs() -> int:
    return max(1, int(os.environ.get("SYMCANON_JOBS", "1")))


# --- train-inr ---------------------------------------------------------------

def _glyph_image(name: str, size: int, seed: int):
    images, labels = synth_glyphs(1, size, seed)
    return images[GLYPH_CLASSES.index(name)]


def _cmd_train_inr(args):
    if (args.glyph is None) == (args.idx is None):
        raise ValueError("pick exactly one of --glyph or --idx")
    if args.glyph is not None:
        image = _glyph_image(args.glyph, args.size, args.glyph_seed)
    else:
        images = load_idx(args.idx)
        if not 0 <= args.index < len(images):
            raise ValueError(f"--index {args.index} outside 0..{len(images) - 1}")
        image = images[args.index]
    arch = Arch.parse(args.arch, Activation(args.activation, args.omega))
    opt = AdamState(lr=args.lr)
    net, history = train_inr(image, arch, args.steps, opt, seed=args.seed)
    cfg = _resolved_config(args, "train-inr")
    save_checkpoint(net, args.out, meta={
        "config": cfg, "config_hash": _config_hash(cfg),
        "final_loss": history[-1], "seed": args.seed,
    })
    return 0


# --- build-zoo ---------------------------------------------------------------

def _fit_zoo_entry(job):
    (index, height, width, pixels, arch_str, act_kind, omega,
     steps, lr, seed) = job
    from .nets import Image
    image = Image(height, width, np.asarray(pixels))
    arch = Arch.parse(arch_str, Activation(act_kind, omega))
    net, history = train_inr(image, arch, steps, AdamState(lr=lr), seed=seed)
    return index, network_to_dict(net), history[-1]


def _cmd_build_zoo(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    bad = [c for c in classes if c not in GLYPH_CLASSES]
    if bad:
        raise ValueError(f"unknown glyph classes {bad}; pick from {GLYPH_CLASSES}")
    images, labels = synth_glyphs(args.n_per_class, args.size, args.seed)
    keep = [i for i, lbl in enumerate(labels) if GLYPH_CLASSES[lbl] in classes]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _resolved_config(args, "build-zoo")
    chash = _config_hash(cfg)

    jobs = []
    for rank, i in enumerate(keep):
        img = images[i]
        jobs.append((rank, img.height, img.width, img.pixels.tolist(),
                     args.arch, args.activation, args.omega,
                     args.steps, args.lr, args.seed + 1000 + rank))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fit_zoo_entry, jobs))
    else:
        results = [_fit_zoo_entry(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    entries = []
    for rank, net_dict, final_loss in results:
        net = network_from_dict(net_dict)
        name = f"inr_{rank:04d}.json"
        cls_name = GLYPH_CLASSES[labels[keep[rank]]]
        save_checkpoint(net, out_dir / name, meta={
            "config_hash": chash, "class": cls_name, "index": rank,
            "final_loss": final_loss, "seed": args.seed + 1000 + rank,
        })
        entries.append({"path": name, "class": cls_name, "index": rank,
                        "final_loss": final_loss})
    manifest = {"config": cfg, "config_hash": chash, "entries": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    return 0


# --- orbit -------------------------------------------------------------------

def _cmd_orbit(args):
    net = load_checkpoint(args.ckpt)
    t = sample(net, ScaleDomain(args.domain), seed=args.seed,
               include_perm=not args.no_perm, include_scale=not args.no_scale)
    moved = apply(t, net)
    if args.noise_sigma > 0.0:
        moved = perturb(moved, args.noise_sigma, seed=args.seed + 1)
    cfg = _resolved_config(args, "orbit")
    meta = {"config": cfg, "config_hash": _config_hash(cfg), "seed": args.seed}
    save_checkpoint(moved, args.out, meta=meta)
    if args.transform_out:
        save_transform(t, args.transform_out, meta=meta)
    return 0


# --- align ---------------------------------------------------------------------

def _cmd_align(args):
    net_a = load_checkpoint(args.ckpt_a)
    net_b = load_checkpoint(args.ckpt_b)
    aligned, result = align(net_a, net_b, AlignMode(args.mode),
                            max_sweeps=args.max_sweeps, seed=args.seed)
    cfg = _resolved_config(args, "align")
    chash = _config_hash(cfg)
    save_checkpoint(aligned, args.out,
                    meta={"config": cfg, "config_hash": chash, "seed": args.seed})
    if args.result_out:
        from .symmetry import transform_to_dict
        payload = {
            "config": cfg, "config_hash": chash,
            "mode": result.mode.value, "seed": result.seed,
            "sweeps": result.sweeps, "converged": result.converged,
            "objective_trace": list(result.objective_trace),
            "transform": transform_to_dict(result.transform),
        }
        with open(args.result_out, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
    return 0


# --- interpolate ---------------------------------------------------------------

def _cmd_interpolate(args):
    net_a = load_checkpoint(args.ckpt_a)
    net_b = load_checkpoint(args.ckpt_b)
    if args.task == "inr":
        ref = load_checkpoint(args.ref_ckpt) if args.ref_ckpt else net_a
        h, w = _parse_grid(args.grid)
        loss_fn = inr_mse_loss(render_inr(ref, h, w))
    else:
        sizes = net_a.arch.sizes
        probe_x, probe_y = synth_class_data(args.probe_size, sizes[0],
                                            sizes[-1], args.probe_seed)
        loss_fn = classifier_loss(probe_x, probe_y)
    curve = barrier_curve(net_a, net_b, loss_fn, n_points=args.n_points)
    cfg = _resolved_config(args, "interpolate")
    meta = {"config_hash": _config_hash(cfg), "label": args.label,
            "barrier": f"{barrier(curve):.9g}"}
    curve_to_csv(curve, args.out, meta=meta)
    return 0


# --- train-ae -------------------------------------------------------------------

def _load_zoo(zoo_dir: str):
    mpath = Path(zoo_dir) / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"no manifest.json under {zoo_dir}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    nets = [load_checkpoint(Path(zoo_dir) / e["path"])
            for e in manifest["entries"]]
    if not nets:
        raise ValueError(f"zoo at {zoo_dir} is empty")
    return nets, manifest


def _cmd_train_ae(args):
    nets, manifest = _load_zoo(args.zoo_dir)
    config = AeConfig(
        variant=GmnVariant(args.variant),
        hidden_dim=args.hidden_dim,
        n_iterations=args.iterations,
        latent_dim=args.latent_dim,
        readout=args.readout,
        decoder_hidden=tuple(int(x) for x in args.decoder_hidden.split(",")),
        decoder_activation=args.decoder_activation,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        weight_decay=args.weight_decay,
        temperature=args.temperature,
        epochs=args.epochs,
        batch_size=args.batch_size,
        val_fraction=args.val_fraction,
        grid=_parse_grid(args.grid),
        probe_size=args.probe_size,
        seed=args.seed,
    )
    model, history = train(nets, config, n_jobs=args.jobs)
    cfg = _resolved_config(args, "train-ae")
    chash = _config_hash(cfg)
    save_ae(model, args.out, meta={"config": cfg, "config_hash": chash,
                                   "zoo_config_hash": manifest.get("config_hash")})
    if args.history_out:
        with open(args.history_out, "w") as fh:
            fh.write(history_to_csv(history, meta={"config_hash": chash}))
    return 0


# --- canonicalize ------------------------------------------------------------------

def _cmd_canonicalize(args):
    model = load_ae(args.model)
    net = load_checkpoint(args.ckpt)
    cfg = _resolved_config(args, "canonicalize")
    chash = _config_hash(cfg)
    canon = canonicalize(net, model)
    save_checkpoint(canon, args.out, meta={"config": cfg, "config_hash": chash})
    if args.latent:
        z = encode_net(net, model)
        net_id = Path(args.ckpt).stem
        header = "net_id," + ",".join(f"z_{i}" for i in range(z.size))
        row = net_id + "," + ",".join(f"{v:.9g}" for v in z)
        with open(args.latent, "w") as fh:
            fh.write(f"# config_hash={chash}\n{header}\n{row}\n")
    return 0


# --- report ---------------------------------------------------------------------

def _csv_meta(path) -> dict:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("#"):
        return {}
    out = {}
    for token in first[1:].split():
        if "=" in token:
            key, val = token.split("=", 1)
            out[key] = val
    return out


def _cmd_report(args):
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ValueError(f"{args.run_dir} is not a directory")
    groups: dict[str, list[float]] = {}
    n_curves = 0
    for path in sorted(run_dir.rglob("*.csv")):
        try:
            curve = curve_from_csv(path)
        except (FormatError, ValueError):
            continue    # histories and latent tables live here too
        label = _csv_meta(path).get("label", "unlabeled")
        groups.setdefault(label, []).append(barrier(curve))
        n_curves += 1
    labels = {}
    for label in sorted(groups):
        vals = np.asarray(groups[label])
        labels[label] = {
            "n": int(vals.size),
            "median_barrier": float(np.median(vals)),
            "q25": float(np.percentile(vals, 25)),
            "q75": float(np.percentile(vals, 75)),
        }
    cfg = _resolved_config(args, "report")
    payload = {"config_hash": _config_hash(cfg), "n_curves": n_curves,
               "labels": labels}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# --- parser ----------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", default=None,
                     help="JSON file with defaults for any flag of this command")
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(_sub=sub)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symcanon",
        description="Canonicalize and align small networks under their "
                    "permutation and scaling symmetries.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-inr", help="fit one coordinate network to an image")
    _add_common(p)
    p.add_argument("--glyph", choices=GLYPH_CLASSES, default=None)
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--idx", default=None, help="IDX image file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--arch", default="2-32-32-1")
    p.add_argument("--activation", default="sine")
    p.add_argument("--omega", type=float, default=30.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_inr)

    p = subs.add_parser("build-zoo", help="train a directory of glyph INRs")
    _add_common(p)
    p.add_argument("--n-per-class", type=int, default=40)
    p.add_argument("--classes", default=",".join(GLYPH_CLASSES))
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--arch", default="2-32-32-1")
    p.add_argument("--activation", default="sine")
    p.add_argument("--omega", type=float, default=30.0)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_build_zoo)

    p = subs.add_parser("orbit", help="apply a random symmetry transform")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domain", default="sign_flip",
                   choices=[d.value for d in ScaleDomain])
    p.add_argument("--no-perm", action="store_true")
    p.add_argument("--no-scale", action="store_true")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--transform-out", default=None)
    p.set_defaults(func=_cmd_orbit)

    p = subs.add_parser("align", help="match one network onto another")
    _add_common(p)
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--mode", default="perm_sign",
                   choices=[m.value for m in AlignMode])
    p.add_argument("--max-sweeps", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--result-out", default=None)
    p.set_defaults(func=_cmd_align)

    p = subs.add_parser("interpolate", help="loss along the straight path")
    _add_common(p)
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--task", choices=["inr", "cls"], default="inr")
    p.add_argument("--n-points", type=int, default=21)
    p.add_argument("--grid", default="16x16")
    p.add_argument("--ref-ckpt", default=None,
                   help="network whose rendering is the MSE target (default: ckpt-a)")
    p.add_argument("--probe-size", type=int, default=256)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--label", default="unlabeled",
                   help="method tag used by the report aggregator")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_interpolate)

    p = subs.add_parser("train-ae", help="train the canonicalization autoencoder")
    _add_common(p)
    p.add_argument("--zoo-dir", required=True)
    p.add_argument("--variant", default="scale_sign",
                   choices=[v.value for v in GmnVariant])
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--readout", default="full_graph",
                   choices=["full_graph", "last_layer"])
    p.add_argument("--decoder-hidden", default="64,128")
    p.add_argument("--decoder-activation", default="silu")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--grid", default="16x16")
    p.add_argument("--probe-size", type=int, default=512)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out", required=True)
    p.add_argument("--history-out", default=None)
    p.set_defaults(func=_cmd_train_ae)

    p = subs.add_parser("canonicalize", help="map a network to its orbit representative")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--latent", default=None,
                   help="also write the latent code to this CSV")
    p.set_defaults(func=_cmd_canonicalize)

    p = subs.add_parser("report", help="aggregate barrier CSVs by label")
    _add_common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, args._sub)
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        sys.stderr.write(json.dumps({
            "error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
