"""Command-line surface: make-data, distill, train, translate, eval, serve, annotate.

Every run resolves its configuration (file + flag overrides), seeds torch and
numpy from it, and writes the resolved config snapshot next to its outputs.
Training commands hold an exclusive lock file in the output directory so two
trainers cannot race on one checkpoint.
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import os
import sys
from contextlib import contextmanager

import numpy as np
import torch

from .config import RunConfig, dump_kv_text, load_run_config, write_config_snapshot
from .factory import (DatasetManifest, default_domains, load_image,
                      make_adversarial_orientation_set, write_dataset)


@contextmanager
def _training_lock(out_path: str):
    lock_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(lock_dir, exist_ok=True)
    lock_path = os.path.join(lock_dir, ".gpunit.lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"another training run owns {lock_path}; remove it if stale")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.remove(lock_path)


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "steps", None) is not None:
        cfg.stage1.iterations = args.steps
        cfg.stage2.iterations = args.steps
    if getattr(args, "semi", False):
        cfg.stage2 = type(cfg.stage2)(**{**_cfg_dict(cfg.stage2),
                                         "semi_supervised": True, "lambda_1": None})
    return cfg


def _cfg_dict(cfg) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _load_manifest(cfg: RunConfig) -> DatasetManifest:
    root = cfg.resolved_data_root()
    if not root:
        raise RuntimeError("no dataset given: set data=<dir> in the config, pass --data, "
                           "or export GPUNIT_DATA")
    return DatasetManifest.load(root)


def cmd_make_data(args) -> int:
    cfg = _resolve_config(args)
    _seed_everything(cfg.seed)
    if args.adversarial:
        adv = make_adversarial_orientation_set(args.train + args.heldout,
                                               labeled=args.labeled,
                                               seed0=9000 + cfg.seed)
        manifest = DatasetManifest(
            [adv.domain_a, adv.domain_b], adv.seeds, args.size, args.train,
            extras={"labeled_seeds": adv.labeled_seeds})
    else:
        seeds = [cfg.seed * 1_000_000 + k for k in range(args.train + args.heldout)]
        manifest = DatasetManifest(default_domains(args.domains), seeds, args.size, args.train)
    write_dataset(args.out, manifest)
    cfg.data = args.out
    write_config_snapshot(cfg, os.path.join(args.out, "config.txt"))
    print(f"wrote {len(manifest.domains)} domains x {len(manifest.seeds)} seeds to {args.out}")
    return 0


def cmd_distill(args) -> int:
    from .stage1 import Stage1Trainer
    cfg = _resolve_config(args)
    _seed_everything(cfg.seed)
    manifest = _load_manifest(cfg)
    with _training_lock(args.out):
        trainer = Stage1Trainer(cfg.model, cfg.stage1, manifest, seed=cfg.seed)
        trainer.run(log_path=_sibling(args.out, ".losses.csv"), progress=not args.quiet)
        trainer.save(args.out)
    write_config_snapshot(cfg, _sibling(args.out, ".config.txt"))
    print(f"stage-1 checkpoint written to {args.out}")
    return 0


def _sibling(path: str, suffix: str) -> str:
    base = path[:-len(".ckpt")] if path.endswith(".ckpt") else path
    return base + suffix


def _load_labeled(labels_dir: str, manifest: DatasetManifest):
    """Reads annotation JSONs laid out as <labels>/<domain_id>/<seed>.json and
    re-renders the matching images from the manifest."""
    from .factory import RenderCache
    from .semi import LabelAnnotation
    cache = RenderCache(manifest)
    labeled = {}
    for domain in manifest.domains:
        ddir = os.path.join(labels_dir, str(domain.id))
        if not os.path.isdir(ddir):
            continue
        anns, images = [], []
        for name in sorted(os.listdir(ddir)):
            if not name.endswith(".json"):
                continue
            ann = LabelAnnotation.load(os.path.join(ddir, name))
            anns.append(ann)
            images.append(cache.get(domain.id, int(ann.image_id))[0])
        if anns:
            labeled[domain.id] = (torch.from_numpy(np.stack(images)).float(), anns)
    if not labeled:
        raise RuntimeError(f"no annotations found under {labels_dir}")
    return labeled


def cmd_train(args) -> int:
    from .stage2 import Stage2Trainer
    cfg = _resolve_config(args)
    _seed_everything(cfg.seed)
    manifest = _load_manifest(cfg)
    if not os.path.exists(args.stage1):
        raise RuntimeError(f"stage-1 checkpoint not found: {args.stage1}")
    labeled = None
    if cfg.stage2.semi_supervised:
        if not args.labels:
            raise RuntimeError("--semi requires --labels <dir>")
        labeled = _load_labeled(args.labels, manifest)
    with _training_lock(args.out):
        trainer = Stage2Trainer(cfg.model, cfg.stage2, manifest, stage1_ckpt=args.stage1,
                                semi_cfg=cfg.semi, labeled=labeled, seed=cfg.seed)
        trainer.run(log_path=_sibling(args.out, ".losses.csv"), progress=not args.quiet)
        trainer.save(args.out)
    write_config_snapshot(cfg, _sibling(args.out, ".config.txt"))
    print(f"stage-2 checkpoint written to {args.out}")
    return 0


def _style_code(nets, style_arg: str, ckpt_dir: str):
    if style_arg.startswith("@sample"):
        _, _, seed_txt = style_arg.partition(":")
        g = torch.Generator().manual_seed(int(seed_txt) if seed_txt else 0)
        z = torch.randn(1, nets.mapping.style_dim, generator=g)
        with torch.no_grad():
            return nets.mapping(z)[0]
    img = torch.from_numpy(load_image(style_arg)).float()
    with torch.no_grad():
        return nets.style_encoder(img)


def cmd_translate(args) -> int:
    from .factory import _to_png
    from .stage2 import load_translation_nets, translate
    cfg = _resolve_config(args)
    _seed_everything(cfg.seed)
    nets = load_translation_nets(args.ckpt)
    content = torch.from_numpy(load_image(args.content)).float()
    style = _style_code(nets, args.style, os.path.dirname(args.ckpt))
    ell = args.ell if nets.controllable else None
    if nets.controllable and ell is None:
        ell = 0.5
    with torch.no_grad():
        y_hat, masks = translate(content, style, nets, ell=ell)
    _to_png(args.out, y_hat.numpy())
    write_config_snapshot(cfg, _sibling(args.out, ".config.txt"))
    summary = {f"layer_{l}": float(m.mean()) for l, m in
               zip(nets.model_cfg.dsc_layers, masks)}
    print(json.dumps({"out": args.out, "mask_means": summary}))
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_model
    from .stage2 import load_translation_nets
    cfg = _resolve_config(args)
    _seed_everything(cfg.seed)
    nets = load_translation_nets(args.ckpt)
    manifest = DatasetManifest.load(args.data) if args.data else _load_manifest(cfg)
    report = evaluate_model(nets, manifest, n_eval=args.n, seed=cfg.seed + 777)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    write_config_snapshot(cfg, _sibling(args.report, ".config.txt"))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    from .stage2 import load_translation_nets
    nets = load_translation_nets(args.ckpt)
    app = create_app(nets)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_annotate(args) -> int:
    """Non-interactive annotation: either copy a provided point list into the
    annotation layout, or adopt the factory ground-truth JSONs found next to
    the images."""
    from .semi import LabelAnnotation
    os.makedirs(args.out, exist_ok=True)
    written = 0
    if args.points:
        with open(args.points, "r", encoding="utf-8") as fh:
            for entry in json.load(fh):
                ann = LabelAnnotation.from_dict(entry)
                ann.save(os.path.join(args.out, f"{ann.image_id}.json"))
                written += 1
    else:
        names = sorted(n for n in os.listdir(args.images)
                       if n.endswith(".json") and not n.startswith("dataset"))
        for name in names[:args.count] if args.count else names:
            ann = LabelAnnotation.load(os.path.join(args.images, name))
            ann.save(os.path.join(args.out, name))
            written += 1
    print(f"wrote {written} annotations to {args.out}")
    return 0 if written else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpunit",
                                description="two-stage unsupervised image translation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key-value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("make-data", help="render a paired-domain dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--domains", type=int, default=6)
    sp.add_argument("--train", type=int, default=600)
    sp.add_argument("--heldout", type=int, default=55)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--adversarial", action="store_true",
                    help="two-domain orientation-trap dataset instead of the default six")
    sp.add_argument("--labeled", type=int, default=4,
                    help="labeled subset size for --adversarial")
    common(sp)
    sp.set_defaults(fn=cmd_make_data)

    sp = sub.add_parser("distill", help="stage-1 prior distillation")
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="dataset root (overrides config)")
    sp.add_argument("--steps", type=int, default=None)
    common(sp)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("train", help="stage-2 translation training")
    sp.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="dataset root (overrides config)")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--semi", action="store_true", help="enable position supervision")
    sp.add_argument("--labels", help="annotation dir: <labels>/<domain_id>/<seed>.json")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("translate", help="translate one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--content", required=True)
    sp.add_argument("--style", required=True,
                    help="style image path, or @sample / @sample:SEED")
    sp.add_argument("--ell", type=float, default=None)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_translate)

    sp = sub.add_parser("eval", help="evaluate a checkpoint into a report JSON")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--n", type=int, default=12)
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("serve", help="run the HTTP inference service")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--host", default="127.0.0.1")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("annotate", help="write annotation files non-interactively")
    sp.add_argument("--images", help="directory holding images + ground-truth JSONs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", help="JSON list of {image_id, radius, points}")
    sp.add_argument("--count", type=int, default=None)
    sp.set_defaults(fn=cmd_annotate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (RuntimeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
