"""Command-line entry point: data generation, training, sampling,
evaluation, ablation sweeps, annotation, and gradient checking.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as tio
from . import numcore as nc
from .annotate import (MOCK, AgentEndpoint, agreement, import_human_scores,
                       run_pipeline, save_records)
from .backbone import block_forward, mm_attention, timestep_embed
from .config import DROP_CHOICES, load_config
from .diffusion import denoise_loss
from .errors import ConfigError, IcditError
from .metrics import evaluate_run
from .numcore import Rng, Tensor
from .synthdata import gen_dataset
from .train import build_denoiser, generate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3

GRAD_TOLERANCE = 1e-4


def cmd_gen_data(cfg, args):
    samples = gen_dataset(cfg.data.n_train + cfg.data.n_eval, seed=cfg.seed)
    out = Path(cfg.paths.dataset_dir)
    tio.save_dataset(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _load_train_eval(cfg):
    samples = tio.load_dataset(cfg.paths.dataset_dir)
    need = cfg.data.n_train + cfg.data.n_eval
    if len(samples) < need:
        raise ConfigError(
            f"dataset has {len(samples)} samples, config needs {need}")
    return samples[:cfg.data.n_train], samples[cfg.data.n_train:need]


def cmd_train(cfg, args):
    train_set, _ = _load_train_eval(cfg)
    denoiser, schedule = build_denoiser(cfg)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        train(denoiser, schedule, train_set, steps=cfg.train.steps,
              batch_size=cfg.train.batch_size, lr=cfg.train.lr,
              clip_norm=cfg.train.clip_norm, seed=cfg.seed,
              drop=cfg.drop_kinds,
              log=lambda step, value: fh.write(f"{step},{value:.17g}\n"))
    ckpt = Path(args.checkpoint or out / "model.ckpt")
    tio.save_checkpoint(ckpt, denoiser.params)
    print(f"trained {cfg.train.steps} steps; checkpoint {ckpt}, "
          f"loss log {log_path}")
    return EXIT_OK


def _save_png_grid(path, images, cols=8):
    from PIL import Image

    cols = min(cols, len(images))
    rows = (len(images) + cols - 1) // cols
    h, w = images[0].shape[1], images[0].shape[2]
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for idx, img in enumerate(images):
        r, c = divmod(idx, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.round(
            np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(grid).save(path)


def cmd_sample(cfg, args):
    _, eval_set = _load_train_eval(cfg)
    denoiser, schedule = build_denoiser(cfg)
    tio.load_checkpoint(args.checkpoint, denoiser.params)
    n = args.n or cfg.data.n_eval
    conditioning = eval_set[:n]
    if len(conditioning) < n:
        raise ConfigError(f"eval split has {len(conditioning)} < {n} samples")
    images = generate(denoiser, schedule, conditioning, seed=cfg.seed,
                      drop=cfg.drop_kinds,
                      embedding_source=args.embedding_source)
    out = Path(args.out or Path(cfg.paths.out_dir) / "samples")
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        tio.save_tensors(out / f"gen_{i:05d}.bin", {"image": img})
    _save_png_grid(out / "grid.png", images)
    print(f"wrote {len(images)} samples to {out}")
    return EXIT_OK


def _load_images(directory):
    directory = Path(directory)
    files = sorted(directory.glob("gen_*.bin"))
    if files:
        return [tio.load_tensors(f)["image"] for f in files]
    return [s.image for s in tio.load_dataset(directory)]


def cmd_evaluate(cfg, args):
    _, eval_set = _load_train_eval(cfg)
    generated = _load_images(args.gen_dir)
    real = [s.image for s in eval_set[:len(generated)]]
    layouts = [s.mask for s in eval_set[:len(generated)]]
    report = evaluate_run(real, generated, layouts, build_denoiser(cfg)[0]
                          .encoders)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_ablate(cfg, args):
    train_set, eval_set = _load_train_eval(cfg)
    eval_set = eval_set[:args.n] if args.n else eval_set
    encoders = build_denoiser(cfg)[0].encoders
    real = [s.image for s in eval_set]
    rows = []
    combos = [c for k in range(0, 4)
              for c in itertools.combinations(DROP_CHOICES, k)]
    for combo in combos:
        from .config import config_from_dict
        cfg_row = config_from_dict({**cfg.to_dict(),
                                    "ablation": {"drop": list(combo)}})
        denoiser, schedule = build_denoiser(cfg_row)
        train(denoiser, schedule, train_set, steps=cfg.train.steps,
              batch_size=cfg.train.batch_size, lr=cfg.train.lr,
              clip_norm=cfg.train.clip_norm, seed=cfg.seed,
              drop=cfg_row.drop_kinds)
        images = generate(denoiser, schedule, eval_set, seed=cfg.seed,
                          drop=cfg_row.drop_kinds)
        report = evaluate_run(real, images, [s.mask for s in eval_set],
                              encoders)
        rows.append({"drop": list(combo), "fid": report["fid"],
                     "dice": report["mean_dice"]})
        print(f"drop={','.join(combo) or 'none'}: "
              f"fid={report['fid']:.4f} dice={report['mean_dice']:.4f}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_annotate(cfg, args):
    samples = tio.load_dataset(cfg.paths.dataset_dir)
    if args.endpoint_url:
        ep = AgentEndpoint(kind="remote", url=args.endpoint_url)
        endpoints = {"step": ep, "describe": ep, "judge": ep}
    else:
        endpoints = {"step": MOCK, "describe": MOCK, "judge": MOCK}
    n = args.n or 1
    records = []
    for i, s in enumerate(samples[:n]):
        recs = run_pipeline(s.image, (args.patch, args.patch),
                            endpoints=endpoints, policy=args.policy,
                            log=lambda msg: print(msg, file=sys.stderr))
        for r in recs:
            r.patch_id += i * 10_000  # namespace patch ids per image
        records.extend(recs)
    out = Path(args.out or Path(cfg.paths.out_dir) / "records.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_records(out, records)
    print(f"wrote {len(records)} records to {out}")
    if args.human_scores:
        matched = import_human_scores(records, args.human_scores)
        rho, mad = agreement(records)
        print(json.dumps({"matched": matched, "spearman_rho": rho,
                          "mean_abs_diff": mad}))
    return EXIT_OK


def _gradcheck_cases(cfg):
    """Seeded input builders per differentiable operation family."""
    denoiser, schedule = build_denoiser(cfg)
    rng = Rng(cfg.seed).split("gradcheck")
    d = cfg.model.d_model

    def leaf(shape, stream):
        return Tensor(rng.split(stream).normal(shape), requires_grad=True)

    cases = {}
    a = leaf((3, 4), "mm_a")
    b = leaf((4, 5), "mm_b")
    cases["matmul"] = (lambda: nc.tsum(nc.square(nc.matmul(a, b))), [a, b])

    s = leaf((3, 6), "softmax")
    cases["softmax"] = (lambda: nc.tsum(nc.square(nc.softmax(s))), [s])

    x = leaf((4, d), "layer_norm")
    gain = leaf((d,), "ln_gain")
    bias = leaf((d,), "ln_bias")
    cases["layer_norm"] = (
        lambda: nc.tsum(nc.square(nc.layer_norm(x, gain, bias))),
        [x, gain, bias])

    g = leaf((4, d), "gelu")
    cases["gelu"] = (lambda: nc.tsum(nc.square(nc.gelu(g))), [g])

    qa = leaf((3, d), "attn_a")
    qb = leaf((2, d), "attn_b")
    attn_p = denoiser.params.blocks[0].attn["text"]
    attn_leaves = [qa, qb] + [t for _, t in attn_p.named("attn")]

    def attn_loss():
        oa, ob = mm_attention(qa, qb, attn_p)
        return nc.add(nc.tsum(nc.square(oa)), nc.tsum(nc.square(ob)))
    cases["mm_attention"] = (attn_loss, attn_leaves)

    n_img = (cfg.model.latent.h // cfg.model.patch_size) ** 2
    z = leaf((n_img, d), "block_z")
    pt = leaf((4, d), "block_p")
    lt = leaf((n_img, d), "block_l")
    et = leaf((5, d), "block_e")
    bp = denoiser.params.blocks[0]
    block_leaves = [z, pt, lt, et] + [t for _, t in bp.named("block")][:6]

    def block_loss():
        t_emb = timestep_embed(3, d, denoiser.params.t_mlp, cfg.diffusion.T)
        zo, po, lo, eo = block_forward(z, pt, lt, et, t_emb, bp,
                                       cfg.model.n_heads)
        return nc.tsum(nc.square(zo))
    cases["block_forward"] = (block_loss, block_leaves)

    sample_ = gen_dataset(1, seed=cfg.seed)[0]
    from .train import encode_conditions
    z0 = denoiser.encoders.encode_image(sample_.image)
    streams = encode_conditions(sample_, denoiser)
    eps = rng.split("loss_eps").normal(z0.shape)
    batch = [(z0, eps, cfg.diffusion.T // 2, streams)]
    # a thin slice of trainable parameters keeps the check under the budget
    loss_leaves = [t for name, t in denoiser.params.named_trainable()
                   if name in ("head.w", "patch_embed.w",
                               "blocks.0.attn.layout.wq_a",
                               "blocks.0.mlp.z.w1", "blocks.0.ada.text.w",
                               "null.text")]
    cases["denoise_loss"] = (
        lambda: denoise_loss(denoiser, batch, schedule), loss_leaves)
    return cases


def cmd_gradcheck(cfg, args):
    start = time.time()
    worst = 0.0
    failed = False
    budgets = {"denoise_loss": 8, "block_forward": 12}
    for name, (loss_fn, leaves) in _gradcheck_cases(cfg).items():
        err = nc.grad_check_leaves(loss_fn, leaves, eps=1e-5,
                                   max_entries=budgets.get(name, 64))
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        if err >= GRAD_TOLERANCE:
            failed = True
        worst = max(worst, err)
        print(f"{name:<16} max rel err {err:.3e}  {status}")
    print(f"worst {worst:.3e} (tolerance {GRAD_TOLERANCE:g}), "
          f"{time.time() - start:.1f}s")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="icdit",
        description="Layout-guided diffusion transformer workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        for flag, kw in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kw)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train, checkpoint={"default": None})
    add("sample", cmd_sample,
        checkpoint={"required": True}, out={"default": None},
        n={"type": int, "default": None},
        embedding_source={"choices": ["image", "patches"],
                          "default": "image"})
    add("evaluate", cmd_evaluate,
        gen_dir={"required": True}, out={"default": None})
    add("ablate", cmd_ablate, out={"default": None},
        n={"type": int, "default": None})
    add("annotate", cmd_annotate, out={"default": None},
        n={"type": int, "default": None}, patch={"type": int, "default": 16},
        policy={"choices": ["abort-on-error", "skip-and-log"],
                "default": "abort-on-error"},
        human_scores={"default": None}, endpoint_url={"default": None})
    add("gradcheck", cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IcditError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
