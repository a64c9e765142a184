"""Acceptance gate: the ten primary behavioral criteria, one line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass/fail lines alongside the test outcomes.
"""

import struct
import time

import numpy as np
import numpy.testing as npt

from birq.config import default_config, resolve
from birq.encoder import EncoderConfig, default_k
from birq.errors import FormatError
from birq.features import (FeatureSequence, SynthSpec, load_features,
                           save_features, synth_dataset)
from birq.masking import MaskPolicy, expected_masked_fraction, sample_mask
from birq.objectives import PenaltyWeights
from birq.quantizer import (Codebook, assign_hard, assign_soft, load_labels,
                            save_labels)
from birq.trainer import (OptimizerState, TrainConfig, load_checkpoint,
                          run_pretrain, save_checkpoint, split_checkpoint)
from birq.verify import (GRADCHECK_THRESHOLD, default_toy_problem,
                         gradcheck_birq, lower_only_pretrain,
                         run_penalty_demo)


def report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num:02d} {name}: {detail}"


TINY_ENC = EncoderConfig(num_layers=2, dim_in=10, dim_hidden=8, num_heads=2,
                         dim_ff=16, num_codes=4, seed=5)


def test_01_gradient_fidelity():
    t0 = time.perf_counter()
    rep = gradcheck_birq(precision="float64")
    elapsed = time.perf_counter() - t0
    threshold = GRADCHECK_THRESHOLD["float64"]
    ok = rep.global_max <= threshold and elapsed < 60.0
    report(1, "gradient fidelity", ok,
           f"max rel err {rep.global_max:.3e} <= {threshold:g}, "
           f"{elapsed:.1f}s < 60s")


def test_02_lower_objective_reduction():
    # 10 sequences at batch 2 over 10 epochs = exactly 50 update steps
    seqs = [np.random.default_rng(s).standard_normal((14, 10))
            for s in range(10)]
    cfg = TrainConfig(encoder=TINY_ENC,
                      policy=MaskPolicy(start_prob=0.3, span=2,
                                        stack_factor=1),
                      weights=PenaltyWeights(w1=0.0, w2=2.4),
                      epochs=10, batch_size=2, lr=1e-3, optimizer="adamw",
                      num_codes=4, code_dim=3, stack_factor=1, k=1,
                      dtype="float32")
    full = run_pretrain(cfg, seqs)
    ref = lower_only_pretrain(cfg, seqs)
    assert len(full.records) == 50
    worst = max(float(np.max(np.abs(full.params[n].astype(np.float64)
                                    - ref.params[n].astype(np.float64))))
                for n in full.params)
    report(2, "pure anchor-loss reduction at w1=0", worst <= 1e-12,
           f"50 steps, max elementwise diff {worst:.3e} <= 1e-12")


def test_03_quantizer_oracle_equivalence():
    rng = np.random.default_rng(17)
    frames = rng.standard_normal((1000, 6))
    entries = rng.standard_normal((16, 6))
    cb = Codebook(entries, seed=0)

    naive = np.empty(1000, dtype=np.int64)
    for t in range(1000):
        best, best_d = 0, np.inf
        for n in range(16):
            d = 0.0
            for j in range(6):
                d += (frames[t, j] - entries[n, j]) ** 2
            if d < best_d:            # strict: first index wins ties
                best, best_d = n, d
        naive[t] = best

    hard = assign_hard(frames.T, cb)
    exact = bool(np.array_equal(hard, naive))

    # tie-break on an exact two-way tie
    tie_cb = Codebook(np.array([[1.0, 0.0], [-1.0, 0.0]]), seed=0)
    tie = assign_hard(np.array([[0.0], [5.0]]), tie_cb)
    tie_ok = tie[0] == 0

    soft = assign_soft(frames.T, cb, tau=0.5)
    d2 = ((frames[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
    part = np.partition(d2, 1, axis=1)
    gap_pos = part[:, 1] - part[:, 0] > 0
    agree = bool(np.array_equal(np.argmax(soft[gap_pos], axis=1),
                                hard[gap_pos]))
    report(3, "hard assignment matches brute force", exact and tie_ok and agree,
           f"10^3 frames exact={exact}, tie-break ok={tie_ok}, "
           f"noiseless soft argmax agrees on {int(gap_pos.sum())} "
           f"positive-gap frames={agree}")


def test_04_sharp_temperature_limit():
    rng = np.random.default_rng(23)
    frames = rng.standard_normal((400, 5))
    entries = rng.standard_normal((8, 5))
    cb = Codebook(entries, seed=0)
    d2 = ((frames[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
    part = np.partition(d2, 1, axis=1)
    sel = part[:, 1] - part[:, 0] >= 0.1
    assert sel.sum() > 100
    soft = assign_soft(frames[sel].T, cb, tau=1e-3)
    hard = assign_hard(frames[sel].T, cb)
    mass = soft[np.arange(sel.sum()), hard]
    worst = float(mass.min())
    report(4, "sharp soft labels collapse to hard index", worst >= 1.0 - 1e-6,
           f"{int(sel.sum())} frames with gap >= 0.1, "
           f"min winner mass {worst:.9f} >= 1-1e-6")


def test_05_penalty_matches_constrained_solution():
    t0 = time.perf_counter()
    rep = run_penalty_demo(default_toy_problem())
    elapsed = time.perf_counter() - t0
    deltas = rep.delta_measured
    monotone = all(b <= a + 1e-12 for a, b in zip(deltas, deltas[1:]))
    dist100 = rep.distances[rep.gammas.index(100.0)]
    ok = monotone and dist100 <= 1e-2 and elapsed < 10.0
    report(5, "penalty run tracks constrained optimum", ok,
           f"distance {dist100:.3e} <= 1e-2 at gamma=100, "
           f"delta non-increasing={monotone}, {elapsed:.1f}s < 10s")


def test_06_masking_statistics():
    policy = MaskPolicy()        # start_prob 0.02, span 20 / stack 2 -> 10
    assert policy.span_eff == 10
    got = expected_masked_fraction(policy, 500, 10_000, seed=11)
    rng = np.random.default_rng(99)
    total = 0
    for _ in range(10_000):
        covered = np.zeros(500, dtype=bool)
        for s in np.flatnonzero(rng.random(500) < 0.02):
            covered[s: s + 10] = True
        total += int(covered.sum())
    oracle = total / (10_000 * 500)
    rel = abs(got - oracle) / oracle
    report(6, "masked fraction matches simulation oracle", rel <= 0.10,
           f"sampled {got:.4f} vs oracle {oracle:.4f}, "
           f"relative gap {rel:.3f} <= 0.10")


def test_07_learning_smoke():
    t0 = time.perf_counter()
    spec = SynthSpec(seed=1000, num_sequences=16, num_frames=240, dim=16,
                     num_clusters=4, cluster_spread=0.05,
                     self_transition=0.95)
    enc = EncoderConfig(num_layers=2, dim_in=32, dim_hidden=32, num_heads=4,
                        dim_ff=64, num_codes=8, seed=3)
    cfg = TrainConfig(encoder=enc,
                      policy=MaskPolicy(start_prob=0.15, span=2,
                                        stack_factor=2),
                      epochs=100, batch_size=8, lr=3e-3, optimizer="adamw",
                      num_codes=8, code_dim=16, stack_factor=2, k=1,
                      dtype="float32")
    result = run_pretrain(cfg, synth_dataset(spec))
    elapsed = time.perf_counter() - t0
    assert len(result.records) == 200
    final_acc = result.records[-1].mask_acc_anchor
    min_util = min(r.codebook_util_enh for r in result.records)
    chance = 1.0 / cfg.num_codes
    ok = final_acc >= 5 * chance and min_util > 0.0 and elapsed < 300.0
    report(7, "200-step learning smoke", ok,
           f"final mask_acc_anchor {final_acc:.3f} >= {5 * chance:.3f} "
           f"(5x chance), min codebook_util_enh {min_util:.4f} > 0, "
           f"{elapsed:.0f}s < 300s")


def test_08_determinism_and_resume(tmp_path):
    seqs = [np.random.default_rng(s).standard_normal((14, 10))
            for s in range(6)]

    def cfg(epochs):
        return TrainConfig(encoder=TINY_ENC,
                           policy=MaskPolicy(start_prob=0.3, span=2,
                                             stack_factor=1),
                           epochs=epochs, batch_size=4, lr=1e-3,
                           optimizer="adamw", num_codes=4, code_dim=3,
                           stack_factor=1, k=1, dtype="float32")

    run_pretrain(cfg(4), seqs, out_dir=str(tmp_path / "a"))
    run_pretrain(cfg(4), seqs, out_dir=str(tmp_path / "b"))
    identical = ((tmp_path / "a" / "metrics.csv").read_bytes()
                 == (tmp_path / "b" / "metrics.csv").read_bytes())

    run_pretrain(cfg(2), seqs, out_dir=str(tmp_path / "part"))
    run_pretrain(cfg(4), seqs, out_dir=str(tmp_path / "tail"),
                 resume_from=str(tmp_path / "part"
                                 / "checkpoint_epoch_0001.ckpt"))
    full_rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    tail_rows = (tmp_path / "tail" / "metrics.csv").read_text().splitlines()
    steps_per_epoch = (len(full_rows) - 1) // 4
    resumed = tail_rows[1:] == full_rows[1 + 2 * steps_per_epoch:]
    ckpt_same = ((tmp_path / "a" / "checkpoint_epoch_0003.ckpt").read_bytes()
                 == (tmp_path / "tail"
                     / "checkpoint_epoch_0003.ckpt").read_bytes())
    report(8, "determinism and resume", identical and resumed and ckpt_same,
           f"repeat CSVs byte-identical={identical}, resumed rows "
           f"identical={resumed}, final checkpoints identical={ckpt_same}")


def test_09_format_roundtrips(tmp_path):
    rng = np.random.default_rng(3)
    outcomes = []

    fpath = tmp_path / "x.feat"
    feats = FeatureSequence(rng.standard_normal((9, 5)).astype(np.float32))
    save_features(feats, str(fpath))
    outcomes.append(np.array_equal(load_features(str(fpath)).data, feats.data))

    hpath = tmp_path / "h.labels"
    hard = rng.integers(0, 8, size=40)
    save_labels(str(hpath), hard, 8)
    got_hard, n_hard = load_labels(str(hpath))
    outcomes.append(np.array_equal(got_hard, hard) and n_hard == 8)

    spath = tmp_path / "s.labels"
    soft = rng.dirichlet(np.ones(8), size=40).astype(np.float32)
    save_labels(str(spath), soft, 8)
    got_soft, n_soft = load_labels(str(spath))
    outcomes.append(np.array_equal(got_soft, soft) and n_soft == 8)

    cpath = tmp_path / "c.ckpt"
    params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32)}
    save_checkpoint(str(cpath), params,
                    OptimizerState(m={"a.w": np.ones((3, 4), np.float32)},
                                   v={"a.w": np.ones((3, 4), np.float32)},
                                   step=9),
                    meta={"epochs_done": 1})
    back, opt, meta = split_checkpoint(load_checkpoint(str(cpath)))
    outcomes.append(np.array_equal(back["a.w"], params["a.w"])
                    and opt.step == 9 and meta["epochs_done"] == 1.0)

    rejected = 0
    for path, loader in ((fpath, load_features), (hpath, load_labels),
                         (cpath, load_checkpoint)):
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        try:
            loader(str(path))
        except FormatError:
            rejected += 1
    outcomes.append(rejected == 3)

    report(9, "binary formats round-trip and reject corruption",
           all(outcomes),
           f"feats/hard/soft/ckpt bit-exact={outcomes[:4]}, "
           f"corrupt magic rejected 3/3={outcomes[4]}")


def test_10_hyperparameter_wiring():
    cfg = resolve(default_config())
    weights = PenaltyWeights(cfg["w1"], cfg["w2"])
    policy = MaskPolicy(noise_std=cfg["mask_noise_std"])
    checks = {
        "tau=0.5": cfg["tau"] == 0.5,
        "w1=0.1": cfg["w1"] == 0.1,
        "w2=2.4": cfg["w2"] == 2.4,
        "gamma=24": abs(weights.gamma - 24.0) < 1e-12,
        "noise_std=0.1": policy.noise_std == 0.1,
        "default_k(5)=3": default_k(5) == 3 and cfg["k"] == 3,
        "default_k(10)=7": default_k(10) == 7,
    }
    failed = [k for k, v in checks.items() if not v]
    report(10, "default hyperparameters materialize", not failed,
           "all of " + ", ".join(checks) if not failed
           else "failed: " + ", ".join(failed))
