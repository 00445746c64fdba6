"""End-to-end acceptance gate.

Each test prints one PASS/FAIL line for its criterion. The training-based
criteria (4, 5, 6, 10) share session-scoped fixtures and take several
minutes of CPU time combined.
"""

import itertools
import json
import time

import numpy as np
import pytest

from icdit import io as tio
from icdit import numcore as nc
from icdit.annotate import (AggregatorParams, ReasoningChain,
                            aggregate_reasoning, agreement, load_records,
                            run_pipeline, save_records)
from icdit.backbone import mm_attention
from icdit.cli import _gradcheck_cases
from icdit.config import Config, config_from_dict
from icdit.diffusion import make_schedule, q_sample
from icdit.encoders import SurrogateEncoderParams, SurrogateEncoders
from icdit.metrics import (FeatureStats, cosine_similarity, dice,
                           feature_stats, frechet_distance)
from icdit.numcore import Rng, Tensor
from icdit.synthdata import gen_dataset, gen_sample, segment_oracle
from icdit.train import build_denoiser, generate, train


def report(criterion, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- shared training fixtures --------------------------------------------------

LAYOUT_STUDY = {
    "seed": 0,
    "train": {"steps": 6000, "batch_size": 8},
    "data": {"n_train": 256, "n_eval": 32},
}


@pytest.fixture(scope="session")
def layout_dataset():
    cfg = config_from_dict(LAYOUT_STUDY)
    ds = gen_dataset(cfg.data.n_train + cfg.data.n_eval, seed=cfg.seed)
    return ds[:cfg.data.n_train], ds[cfg.data.n_train:]


def _trained(drop, layout_dataset):
    cfg = config_from_dict(LAYOUT_STUDY)
    train_set, _ = layout_dataset
    denoiser, schedule = build_denoiser(cfg)
    train(denoiser, schedule, train_set, steps=cfg.train.steps,
          batch_size=cfg.train.batch_size, lr=cfg.train.lr,
          clip_norm=cfg.train.clip_norm, seed=cfg.seed, drop=drop)
    return denoiser, schedule


@pytest.fixture(scope="session")
def full_model(layout_dataset):
    return _trained((), layout_dataset)


@pytest.fixture(scope="session")
def no_layout_model(layout_dataset):
    return _trained(("layout",), layout_dataset)


# -- criterion 1: gradient integrity -------------------------------------------

def test_criterion_1_gradient_integrity():
    start = time.time()
    cfg = config_from_dict({"data": {"n_train": 4, "n_eval": 2},
                            "train": {"steps": 1, "batch_size": 1}})
    budgets = {"denoise_loss": 8, "block_forward": 12}
    worst = {}
    for name, (loss_fn, leaves) in _gradcheck_cases(cfg).items():
        worst[name] = nc.grad_check_leaves(loss_fn, leaves, eps=1e-5,
                                           max_entries=budgets.get(name, 64))
    elapsed = time.time() - start
    peak = max(worst.values())
    ok = peak < 1e-4 and elapsed < 60.0
    report(1, ok, f"max rel err {peak:.2e} over {sorted(worst)} "
                  f"in {elapsed:.1f}s (limits 1e-4, 60s)")


# -- criterion 2: attention oracle ---------------------------------------------

def brute_force_attention(a, b, p):
    """Independent oracle: explicit concatenated-sequence attention."""
    qa, ka, va = a @ p.wq_a.data, a @ p.wk_a.data, a @ p.wv_a.data
    qb, kb, vb = b @ p.wq_b.data, b @ p.wk_b.data, b @ p.wv_b.data
    q = np.concatenate([qa, qb])
    k = np.concatenate([ka, kb])
    v = np.concatenate([va, vb])
    d = q.shape[1]
    h = p.n_heads
    dh = d // h
    out = np.zeros_like(q)
    for i in range(h):
        qs, ks, vs = (m[:, i * dh:(i + 1) * dh] for m in (q, k, v))
        scores = qs @ ks.T / np.sqrt(dh)
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = w / w.sum(axis=1, keepdims=True)
        out[:, i * dh:(i + 1) * dh] = w @ vs
    na = a.shape[0]
    return out[:na] @ p.wo_a.data, out[na:] @ p.wo_b.data


def test_criterion_2_attention_oracle():
    from icdit.backbone import AttentionParams
    start = time.time()
    worst = 0.0
    for n_a, n_b, d, heads in itertools.product(
            range(1, 5), range(1, 5), (2, 4), (1, 2)):
        rng = Rng(7).split("attn", n_a, n_b, d, heads)
        params = AttentionParams.init(rng.split("p"), d, heads)
        a = rng.split("a").normal((n_a, d))
        b = rng.split("b").normal((n_b, d))
        oa, ob = mm_attention(Tensor(a), Tensor(b), params)
        ea, eb = brute_force_attention(a, b, params)
        worst = max(worst, np.abs(oa.data - ea).max(),
                    np.abs(ob.data - eb).max())
    elapsed = time.time() - start
    ok = worst < 1e-10 and elapsed < 10.0
    report(2, ok, f"max abs err {worst:.2e} over 64 shape combos "
                  f"in {elapsed:.1f}s (limits 1e-10, 10s)")


# -- criterion 3: diffusion marginals ------------------------------------------

def test_criterion_3_diffusion_marginals():
    cfg = Config()
    schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end, require_destroyed=True)
    rng = Rng(11).split("marginals")
    n = 100_000
    variances = {}
    for t in (0, schedule.T // 2, schedule.T - 1):
        z0 = rng.split("z0", t).normal(n)
        eps = rng.split("eps", t).normal(n)
        variances[t] = float(np.var(q_sample(z0, t, eps, schedule)))
    var_ok = all(0.96 <= v <= 1.04 for v in variances.values())

    snr = np.array([schedule.snr(t) for t in range(schedule.T)])
    snr_ok = bool(np.all(np.diff(snr) < 0))

    # zero predictor: loss reduces to E[eps^2] = 1
    eps = Rng(12).split("zp").normal(10_000)
    zero_loss = float(np.mean(eps ** 2))
    loss_ok = abs(zero_loss - 1.0) <= 0.05

    ok = var_ok and snr_ok and loss_ok
    report(3, ok, f"Var(q_sample)={ {t: round(v, 4) for t, v in variances.items()} }, "
                  f"SNR strictly decreasing={snr_ok}, "
                  f"zero-predictor loss={zero_loss:.4f} (1.0 ± 0.05)")


# -- criterion 4: overfit sanity -----------------------------------------------

def test_criterion_4_overfit():
    cfg = Config()  # depth 2, d_model 32, T 200
    denoiser, schedule = build_denoiser(cfg)
    ds = gen_dataset(8, seed=0)
    start = time.time()
    losses = train(denoiser, schedule, ds, steps=2000, batch_size=16,
                   lr=1e-2, seed=0)
    elapsed = time.time() - start
    final = float(np.mean(losses[-10:]))
    ok = final < 0.05 and elapsed < 600.0 and losses[0] > 0.8
    report(4, ok, f"loss {losses[0]:.3f} -> {final:.4f} over "
                  f"{len(losses)} steps in {elapsed:.0f}s "
                  f"(limits < 0.05, <= 2000 steps, < 600s)")


# -- criterion 5: layout controllability ----------------------------------------

def test_criterion_5_layout_controllability(layout_dataset, full_model,
                                            no_layout_model):
    _, eval_set = layout_dataset
    held_out = eval_set[:32]

    def mean_dice(model):
        denoiser, schedule = model
        images = generate(denoiser, schedule, held_out, seed=1)
        return float(np.mean([dice(segment_oracle(img), s.mask)
                              for img, s in zip(images, held_out)]))

    with_layout = mean_dice(full_model)
    without_layout = mean_dice(no_layout_model)
    ok = with_layout > 0.6 and (with_layout - without_layout) >= 0.2
    report(5, ok, f"mean Dice with layout {with_layout:.3f} (> 0.6), "
                  f"without {without_layout:.3f}, "
                  f"gap {with_layout - without_layout:.3f} (>= 0.2)")


# -- criterion 6: ablation direction --------------------------------------------

def test_criterion_6_ablation_direction(layout_dataset, full_model):
    train_set, eval_set = layout_dataset
    eval_set = eval_set[:16]
    encoders = full_model[0].encoders
    real_stats = feature_stats([s.image for s in eval_set], encoders)

    def fid_of(model, drop):
        denoiser, schedule = model
        images = generate(denoiser, schedule, eval_set, seed=1, drop=drop)
        return frechet_distance(real_stats, feature_stats(images, encoders))

    fid_full = fid_of(full_model, ())

    # all 7 non-empty drop combinations must complete; only the caption-only
    # row (drop layout+embedding) anchors the direction comparison and gets
    # a meaningful training budget
    fid_caption_only = None
    completed = []
    all_drops = [c for k in (1, 2, 3)
                 for c in itertools.combinations(
                     ("caption", "layout", "embedding"), k)]
    for drop_named in all_drops:
        kinds = tuple({"caption": "text", "layout": "layout",
                       "embedding": "embedding"}[d] for d in drop_named)
        anchor = set(drop_named) == {"layout", "embedding"}
        steps = 1500 if anchor else 150
        cfg = config_from_dict(LAYOUT_STUDY)
        denoiser, schedule = build_denoiser(cfg)
        train(denoiser, schedule, train_set, steps=steps,
              batch_size=cfg.train.batch_size, seed=cfg.seed, drop=kinds)
        fid = fid_of((denoiser, schedule), kinds)
        completed.append((drop_named, round(fid, 3)))
        if anchor:
            fid_caption_only = fid
    ok = (fid_full < fid_caption_only) and len(completed) == 7
    report(6, ok, f"FID full {fid_full:.3f} < caption-only "
                  f"{fid_caption_only:.3f}; 7 combos completed: {completed}")


# -- criterion 7: metric identities ---------------------------------------------

def test_criterion_7_metric_identities():
    enc = SurrogateEncoders(SurrogateEncoderParams(seed=0))
    stats = feature_stats([gen_sample(i).image for i in range(10)], enc)
    checks = {}
    checks["fid(X,X) < 1e-6"] = frechet_distance(stats, stats) < 1e-6
    one_d = frechet_distance(
        FeatureStats(np.array([0.0]), np.array([[1.0]]), 2),
        FeatureStats(np.array([1.0]), np.array([[1.0]]), 2))
    checks["1-D closed form = 1"] = abs(one_d - 1.0) <= 1e-9

    a = np.zeros((1, 8, 8)); a[0, :2, :2] = 1
    b = np.zeros((1, 8, 8)); b[0, 4:6, 4:6] = 1
    c = np.zeros((1, 8, 8)); c[0, 1:3, :2] = 1
    checks["dice identities"] = (dice(a, a) == 1.0 and dice(a, b) == 0.0
                                 and dice(a, c) == 0.5)

    u = Rng(3).split("u").normal(14)
    checks["cosine scale invariance"] = (
        abs(cosine_similarity(u, 3.7 * u) - 1.0) < 1e-12
        and abs(cosine_similarity(2.5 * u, u) - 1.0) < 1e-12)
    ok = all(checks.values())
    report(7, ok, "; ".join(f"{k}={v}" for k, v in checks.items()))


# -- criterion 8: annotation pipeline --------------------------------------------

def test_criterion_8_annotation(tmp_path):
    image = gen_sample(41).image
    records_a = run_pipeline(image, (4, 4))  # 64 patches
    records_b = run_pipeline(image, (4, 4))
    save_records(tmp_path / "a.jsonl", records_a)
    save_records(tmp_path / "b.jsonl", records_b)
    deterministic = (tmp_path / "a.jsonl").read_bytes() == \
        (tmp_path / "b.jsonl").read_bytes()

    sums_ok = all(abs(r.dist.probs.sum() - 1.0) < 1e-12 for r in records_a)
    q_ok = all(0.0 <= r.judge_score <= 1.0 for r in records_a)

    # logit shift invariance of the aggregation
    params = AggregatorParams(seed=0)
    feats = Rng(5).split("f").normal((3, 8))
    base = aggregate_reasoning(
        ReasoningChain(0, [("s", f) for f in feats]), params)
    logits = feats.mean(axis=0) @ params.projection + 123.0
    shifted = np.exp(logits - logits.max()); shifted /= shifted.sum()
    shift_ok = bool(np.allclose(base.probs, shifted, atol=1e-12)
                    and base.label == int(np.argmax(logits)))

    scored = records_a[:5]
    qs = [0.1, 0.3, 0.5, 0.7, 0.9]
    for r, q in zip(scored, qs):
        r.judge_score = q
        r.human_score = 1.0 - q
    rho, _ = agreement(scored)
    reversed_ok = rho == -1.0

    ok = deterministic and sums_ok and q_ok and shift_ok and reversed_ok
    report(8, ok, f"byte-deterministic={deterministic}, probs sum to 1={sums_ok}, "
                  f"Q in [0,1]={q_ok}, shift invariant={shift_ok}, "
                  f"reversed rho={rho}")


# -- criterion 9: serialization ---------------------------------------------------

def test_criterion_9_serialization(tmp_path):
    from icdit.backbone import ModelParams
    from icdit.errors import FormatError

    params = ModelParams.init(seed=8)
    ckpt = tmp_path / "m.ckpt"
    tio.save_checkpoint(ckpt, params)
    blob_a = ckpt.read_bytes()
    restored = ModelParams.init(seed=9)
    tio.load_checkpoint(ckpt, restored)
    tio.save_checkpoint(tmp_path / "m2.ckpt", restored)
    ckpt_ok = (tmp_path / "m2.ckpt").read_bytes() == blob_a

    tensors = {"x": Rng(1).split("x").normal((3, 5)),
               "y": Rng(1).split("y").normal(7)}
    blob = tio.tensors_to_bytes(tensors)
    container_ok = tio.tensors_to_bytes(tio.tensors_from_bytes(blob)) == blob

    truncated_ok = False
    try:
        tio.tensors_from_bytes(blob[:-3])
    except FormatError:
        truncated_ok = True

    records = run_pipeline(gen_sample(3).image, (16, 16))
    save_records(tmp_path / "r.jsonl", records)
    save_records(tmp_path / "r2.jsonl",
                 load_records(tmp_path / "r.jsonl"))
    records_ok = (tmp_path / "r.jsonl").read_bytes() == \
        (tmp_path / "r2.jsonl").read_bytes()

    ok = ckpt_ok and container_ok and truncated_ok and records_ok
    report(9, ok, f"checkpoint bit-exact={ckpt_ok}, container round-trip="
                  f"{container_ok}, truncation rejected={truncated_ok}, "
                  f"records byte-identical={records_ok}")


# -- criterion 10: full-run determinism -------------------------------------------

def test_criterion_10_full_determinism(tmp_path):
    from icdit.cli import EXIT_OK, main

    cfg = {
        "seed": 13,
        "model": {"depth": 1, "d_model": 16, "n_heads": 2},
        "diffusion": {"T": 20},
        "train": {"steps": 25, "batch_size": 4},
        "data": {"n_train": 8, "n_eval": 4},
    }
    artifacts = {}
    for run in ("r1", "r2"):
        base = tmp_path / run
        conf = dict(cfg)
        conf["paths"] = {"out_dir": str(base / "out"),
                         "dataset_dir": str(base / "data")}
        cpath = base / "run.json"
        base.mkdir()
        cpath.write_text(json.dumps(conf))
        assert main(["gen-data", "--config", str(cpath)]) == EXIT_OK
        assert main(["train", "--config", str(cpath),
                     "--checkpoint", str(base / "m.ckpt")]) == EXIT_OK
        assert main(["sample", "--config", str(cpath),
                     "--checkpoint", str(base / "m.ckpt"),
                     "--out", str(base / "samples"), "--n", "2"]) == EXIT_OK
        assert main(["evaluate", "--config", str(cpath),
                     "--gen-dir", str(base / "samples"),
                     "--out", str(base / "report.json")]) == EXIT_OK
        artifacts[run] = {
            "loss": (base / "out" / "loss.csv").read_bytes(),
            "ckpt": (base / "m.ckpt").read_bytes(),
            "samples": [p.read_bytes() for p in
                        sorted((base / "samples").glob("gen_*.bin"))],
            "report": (base / "report.json").read_bytes(),
        }
    same = {k: artifacts["r1"][k] == artifacts["r2"][k]
            for k in ("loss", "ckpt", "samples", "report")}
    ok = all(same.values())
    report(10, ok, f"identical across two runs: {same}")
