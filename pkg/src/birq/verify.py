"""Independent verification oracles.

Three families of checks, deliberately built with as little shared
arithmetic as possible:

  * finite-difference gradient checking of F, G, and the combined loss on
    a tiny fixed instance (the differentiation contract)
  * a quadratic toy bilevel problem whose constrained optimum has a KKT
    closed form, against which gradient descent on the penalty objective
    w1*F + w2*G is compared for a sweep of gamma = w2/w1
  * a straight-line numpy reimplementation of the loss pipeline (its own
    forward pass, its own quantizer math) compared to the module
    implementations on a fixed instance

Plus ``lower_only_pretrain``: a reference trainer that never constructs
the enhanced-label path, for checking that w1 = 0 training reduces to the
plain masked-prediction recipe. It reuses the graph building blocks on
purpose: the claim under test is about the objective, and only identical
floating-point kernels can make the comparison bit-exact.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import seeding
from .autodiff import Tensor, no_grad
from .encoder import EncoderConfig, init_encoder, param_names, params_to_tensors
from .errors import NumericError
from .masking import MaskPolicy, sample_mask, apply_mask
from .objectives import (PenaltyWeights, anchor_labels, build_step_graph,
                         make_bundle, masked_ce_graph)
from .quantizer import codebook_utilization, sample_gumbel
from .trainer import (METRICS_HEADER, MetricsRecord, OptimizerState, RunResult,
                      TrainConfig, _apply_update, _grad_or_zero, lr_schedule,
                      save_checkpoint, _prepare_dataset)

FD_STEP = 1e-5
REL_ERR_FLOOR = 1e-8
GRADCHECK_THRESHOLD = {"float64": 1e-4, "float32": 1e-2}


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def finite_diff_grad(loss_fn, theta: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences per coordinate: (f(x+h) - f(x-h)) / 2h."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn(theta))
        flat[i] = orig - step
        lo = float(loss_fn(theta))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite loss during finite differences at "
                               f"coordinate {i}")
        out[i] = (hi - lo) / (2.0 * step)
    return grad


# ----------------------------------------------------------------------
# tiny training instance for gradient checks

TINY = dict(num_layers=2, dim_in=10, dim_hidden=8, num_heads=2, dim_ff=16,
            num_codes=4, num_frames=6, k=1, tau=0.5, w1=0.1, w2=2.4)


@dataclass
class TinyInstance:
    """A frozen single-sequence batch with everything a loss needs."""

    cfg: EncoderConfig
    params: dict
    bundle: object
    x_clean: np.ndarray     # (1, T, d_in)
    x_masked: np.ndarray
    mask_idx: list
    anchors: list           # [[labels]] per bundle per sequence
    gumbel: list            # [[noise]] matching build_step_graph layout
    k: int
    weights: PenaltyWeights


def build_tiny_instance(dtype=np.float64, seed: int = 7) -> TinyInstance:
    cfg = EncoderConfig(num_layers=TINY["num_layers"], dim_in=TINY["dim_in"],
                        dim_hidden=TINY["dim_hidden"], num_heads=TINY["num_heads"],
                        dim_ff=TINY["dim_ff"], num_codes=TINY["num_codes"],
                        seed=seed)
    params = init_encoder(cfg, dtype=dtype)
    bundle = make_bundle(seed + 1, TINY["num_codes"], 3, TINY["dim_in"],
                         TINY["dim_hidden"], tau=TINY["tau"])
    t = TINY["num_frames"]
    x = seeding.rng(seed, 100).standard_normal((t, TINY["dim_in"]))
    policy = MaskPolicy(start_prob=0.3, span=2, stack_factor=1)
    m = sample_mask(policy, t, (seed, 0, 0))
    x_masked = apply_mask(x.T, m, policy, (seed, 0, 0)).T
    gum = sample_gumbel((seed, 0, 0), t, TINY["num_codes"])
    anchors = [[anchor_labels(x, bundle)]]
    return TinyInstance(
        cfg=cfg, params=params, bundle=bundle,
        x_clean=x[None].astype(dtype), x_masked=x_masked[None].astype(dtype),
        mask_idx=[m.indices], anchors=anchors, gumbel=[[gum]],
        k=TINY["k"], weights=PenaltyWeights(TINY["w1"], TINY["w2"]))


def _instance_losses(inst: TinyInstance, params: dict,
                     stop_label_grad: bool = False):
    """(F, G) values for given parameter arrays, graph-free evaluation."""
    with no_grad():
        params_t = {n: Tensor(v) for n, v in params.items()}
        sg = build_step_graph(params_t, inst.cfg, [inst.bundle], inst.x_clean,
                              inst.x_masked, inst.mask_idx, inst.anchors,
                              inst.gumbel, inst.k,
                              stop_label_grad=stop_label_grad)
    return float(sg.loss_f.item()), float(sg.loss_g.item())


def _instance_grads(inst: TinyInstance, stop_label_grad: bool = False):
    """Analytic per-tensor gradients of F and G via the graph."""
    params_t = params_to_tensors(inst.params)
    sg = build_step_graph(params_t, inst.cfg, [inst.bundle], inst.x_clean,
                          inst.x_masked, inst.mask_idx, inst.anchors,
                          inst.gumbel, inst.k, stop_label_grad=stop_label_grad)
    sg.loss_f.backward()
    grad_f = {n: _grad_or_zero(t).copy() for n, t in params_t.items()}
    sg.loss_g.backward()
    grad_g = {n: _grad_or_zero(t).copy() for n, t in params_t.items()}
    return grad_f, grad_g


@dataclass
class GradCheckReport:
    step_size: float
    precision: str
    per_loss: dict          # loss name -> tensor name -> max relative error
    global_max: float
    worst_loss: str
    worst_tensor: str

    def passed(self, threshold: float | None = None) -> bool:
        if threshold is None:
            threshold = GRADCHECK_THRESHOLD[self.precision]
        return self.global_max <= threshold


def gradcheck_birq(precision: str = "float64", step: float = FD_STEP,
                   sabotage: str | None = None, seed: int = 7) -> GradCheckReport:
    """Finite-difference check of F, G, and w1*F + w2*G on the tiny fixture.

    ``precision`` selects the dtype of the graph whose analytic gradients
    are under test; the finite differences themselves always run in 64-bit
    at the same (exactly representable) parameter point. ``sabotage`` names
    a parameter tensor whose analytic gradient is deliberately corrupted,
    as a negative control for the check itself.
    """
    dtype = {"float64": np.float64, "float32": np.float32}[precision]
    inst = build_tiny_instance(dtype=dtype, seed=seed)
    names = param_names(inst.cfg)
    if sabotage is not None and sabotage not in names:
        raise ValueError(f"unknown tensor for sabotage: {sabotage}")

    grad_f, grad_g = _instance_grads(inst)
    w1, w2 = inst.weights.w1, inst.weights.w2
    grad_c = {n: w1 * grad_f[n] + w2 * grad_g[n] for n in names}
    if sabotage is not None:
        for grads in (grad_f, grad_g, grad_c):
            grads[sabotage] = grads[sabotage] + 1.0

    fd_inst = TinyInstance(
        cfg=inst.cfg,
        params={n: np.asarray(v, dtype=np.float64).copy()
                for n, v in inst.params.items()},
        bundle=inst.bundle,
        x_clean=inst.x_clean.astype(np.float64),
        x_masked=inst.x_masked.astype(np.float64),
        mask_idx=inst.mask_idx, anchors=inst.anchors, gumbel=inst.gumbel,
        k=inst.k, weights=inst.weights)

    per_loss = {"F": {}, "G": {}, "combined": {}}
    params = fd_inst.params
    for name in names:
        arr = params[name]
        fd_f = np.zeros(arr.shape, dtype=np.float64)
        fd_g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.ravel()
        ff = fd_f.ravel()
        fg = fd_g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_hi, g_hi = _instance_losses(fd_inst, params)
            flat[i] = orig - step
            f_lo, g_lo = _instance_losses(fd_inst, params)
            flat[i] = orig
            denom = float(orig + step) - float(orig - step)
            ff[i] = (f_hi - f_lo) / denom
            fg[i] = (g_hi - g_lo) / denom
        fd_c = w1 * fd_f + w2 * fd_g
        for key, fd, an in (("F", fd_f, grad_f[name]),
                            ("G", fd_g, grad_g[name]),
                            ("combined", fd_c, grad_c[name])):
            errs = [rel_err(float(a), float(b))
                    for a, b in zip(fd.ravel(), np.asarray(an, dtype=np.float64).ravel())]
            per_loss[key][name] = max(errs)

    global_max = 0.0
    worst = ("", "")
    for key, tensors in per_loss.items():
        for name, err in tensors.items():
            if err > global_max:
                global_max = err
                worst = (key, name)
    return GradCheckReport(step_size=step, precision=precision,
                           per_loss=per_loss, global_max=global_max,
                           worst_loss=worst[0], worst_tensor=worst[1])


# ----------------------------------------------------------------------
# quadratic toy bilevel problem

@dataclass(frozen=True)
class QuadraticForm:
    """q(x) = (x - b)^T A (x - b); minimum value 0 on b + null(A)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if a.shape != (b.size, b.size):
            raise ValueError("quadratic form shape mismatch")
        if not np.allclose(a, a.T, atol=1e-12):
            raise ValueError("quadratic form matrix must be symmetric")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def value(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=np.float64) - self.b
        return float(d @ self.a @ d)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (self.a @ (np.asarray(x, dtype=np.float64) - self.b))


@dataclass(frozen=True)
class ToyBilevelProblem:
    """min F(x) over the near-minimizers of G: {x : G(x) - min G <= delta}."""

    f: QuadraticForm
    g: QuadraticForm
    delta: float = 1.0

    def __post_init__(self):
        if self.f.b.size != self.g.b.size:
            raise ValueError("F and G dimensions disagree")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        eig_g = np.linalg.eigvalsh(self.g.a)
        if eig_g.min() < -1e-10:
            raise ValueError("G must be positive semidefinite")
        eig_f = np.linalg.eigvalsh(self.f.a)
        if eig_f.min() <= 0:
            raise ValueError("F must be positive definite")

    @property
    def dim(self) -> int:
        return self.f.b.size


def default_toy_problem(delta: float = 1.0) -> ToyBilevelProblem:
    """The hand-checkable fixture: F centered at (2,0), G at the origin."""
    eye = np.eye(2)
    return ToyBilevelProblem(f=QuadraticForm(eye, np.array([2.0, 0.0])),
                             g=QuadraticForm(eye, np.zeros(2)),
                             delta=delta)


def solve_toy_oracle(p: ToyBilevelProblem, tol: float = 1e-13) -> np.ndarray:
    """Constrained optimum via KKT with scalar multiplier bisection.

    min G is 0 by construction (attained at g.b). If the unconstrained
    minimizer of F is feasible it wins. Otherwise the constraint is active
    and the stationarity system (A_F + lam*A_G) x = A_F b_F + lam*A_G b_G
    is solved for the multiplier lam with G(x(lam)) = delta, found by
    bisection (G(x(lam)) is decreasing in lam).
    """
    if p.g.value(p.f.b) <= p.delta:
        return p.f.b.copy()
    if p.delta == 0.0:
        # feasible set is the affine minimizer set of G
        eigval, eigvec = np.linalg.eigh(p.g.a)
        null = eigvec[:, eigval < 1e-12]
        if null.shape[1] == 0:
            return p.g.b.copy()
        rhs = null.T @ p.f.a @ (p.f.b - p.g.b)
        y = np.linalg.solve(null.T @ p.f.a @ null, rhs)
        return p.g.b + null @ y

    def theta_of(lam: float) -> np.ndarray:
        lhs = p.f.a + lam * p.g.a
        rhs = p.f.a @ p.f.b + lam * (p.g.a @ p.g.b)
        return np.linalg.solve(lhs, rhs)

    def phi(lam: float) -> float:
        return p.g.value(theta_of(lam)) - p.delta

    lo, hi = 0.0, 1.0
    while phi(hi) > 0:
        hi *= 2.0
        if hi > 1e18:
            raise ValueError("multiplier search failed; degenerate problem")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    return theta_of(0.5 * (lo + hi))


@dataclass
class BilevelReport:
    gammas: list
    theta_pen: list
    delta_measured: list
    theta_oracle: list
    distances: list

    def rows(self):
        for i, gamma in enumerate(self.gammas):
            yield (gamma, self.delta_measured[i], self.distances[i])


def run_penalty_demo(p: ToyBilevelProblem, gammas=(1.0, 10.0, 100.0, 1000.0),
                     eta: float | None = None, steps: int = 20000,
                     theta0: np.ndarray | None = None) -> BilevelReport:
    """Gradient descent on F + gamma*G per gamma, compared to the oracle.

    For each gamma the measured lower-level slack delta(gamma) =
    G(theta_pen) - min G defines the constrained problem the penalty run
    implicitly solved; the report carries the distance between the penalty
    solution and that problem's KKT optimum.
    """
    if theta0 is None:
        theta0 = np.full(p.dim, 3.0)
    report = BilevelReport([], [], [], [], [])
    for gamma in gammas:
        if gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        l_smooth = 2.0 * float(np.linalg.eigvalsh(p.f.a + gamma * p.g.a).max())
        step_size = eta if eta is not None else 0.5 / l_smooth
        theta = theta0.astype(np.float64).copy()
        for _ in range(steps):
            theta = theta - step_size * (p.f.grad(theta) + gamma * p.g.grad(theta))
            if p.f.value(theta) + gamma * p.g.value(theta) > 1e6:
                raise NumericError(f"penalty descent diverged at gamma={gamma}; "
                                   f"reduce the step size")
        delta_meas = max(p.g.value(theta), 0.0)
        oracle_problem = ToyBilevelProblem(p.f, p.g, delta=delta_meas)
        theta_star = solve_toy_oracle(oracle_problem)
        report.gammas.append(float(gamma))
        report.theta_pen.append(theta)
        report.delta_measured.append(delta_meas)
        report.theta_oracle.append(theta_star)
        report.distances.append(float(np.linalg.norm(theta - theta_star)))
    return report


# ----------------------------------------------------------------------
# straight-line reimplementation of the loss pipeline

def _ref_forward_tap_logits(params: dict, cfg: EncoderConfig, x: np.ndarray,
                            k: int):
    """Independent numpy forward pass; returns (tap rows, logits rows).

    Written as plain loops over layers and heads so a bug in the module
    forward cannot hide here too.
    """
    t, _ = x.shape
    d = cfg.dim_hidden
    z = x @ params["in_proj.w"] + params["in_proj.b"]
    if cfg.pos_encoding:
        pe = np.zeros((t, d))
        for pos in range(t):
            for j in range(d):
                angle = pos / 10000.0 ** (2.0 * (j // 2) / d)
                pe[pos, j] = math.sin(angle) if j % 2 == 0 else math.cos(angle)
        z = z + pe

    def ln(v, gain, bias):
        mu = v.mean(axis=1, keepdims=True)
        ctr = v - mu
        var = (ctr * ctr).mean(axis=1, keepdims=True)
        return ctr / np.sqrt(var + 1e-5) * gain + bias

    def gelu_ref(v):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * v * (1.0 + np.tanh(c * (v + 0.044715 * v ** 3)))

    tapped = None
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        q = z @ params[f"{pre}.attn.wq"]
        key = z @ params[f"{pre}.attn.wk"]
        val = z @ params[f"{pre}.attn.wv"]
        hd = d // cfg.num_heads
        ctx = np.zeros((t, d))
        for h in range(cfg.num_heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = q[:, sl] @ key[:, sl].T / math.sqrt(hd)
            scores = scores - scores.max(axis=1, keepdims=True)
            att = np.exp(scores)
            att = att / att.sum(axis=1, keepdims=True)
            ctx[:, sl] = att @ val[:, sl]
        attn_out = ctx @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]
        a = ln(z + attn_out, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        ff = gelu_ref(a @ params[f"{pre}.ff.w1"] + params[f"{pre}.ff.b1"])
        ff = ff @ params[f"{pre}.ff.w2"] + params[f"{pre}.ff.b2"]
        z = ln(a + ff, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        if layer + 1 == k:
            mu = z.mean(axis=1, keepdims=True)
            ctr = z - mu
            sd = np.sqrt((ctr * ctr).mean(axis=1, keepdims=True))
            tapped = ctr / sd
    logits = z @ params["head.w"] + params["head.b"]
    return tapped, logits


def _ref_hard_labels(x: np.ndarray, proj: np.ndarray, codes: np.ndarray) -> np.ndarray:
    u = x @ proj
    out = np.zeros(x.shape[0], dtype=np.int64)
    for t in range(u.shape[0]):
        best, best_d = 0, math.inf
        for n in range(codes.shape[0]):
            diff = u[t] - codes[n]
            dist = float(diff @ diff)
            if dist < best_d:
                best, best_d = n, dist
        out[t] = best
    return out


def _ref_soft_labels(zk: np.ndarray, proj: np.ndarray, codes: np.ndarray,
                     tau: float, gumbel: np.ndarray) -> np.ndarray:
    u = zk @ proj
    rows = np.zeros((u.shape[0], codes.shape[0]))
    for t in range(u.shape[0]):
        scores = np.zeros(codes.shape[0])
        for n in range(codes.shape[0]):
            diff = u[t] - codes[n]
            scores[n] = -(float(diff @ diff) + gumbel[t, n]) / tau
        scores = scores - scores.max()
        e = np.exp(scores)
        rows[t] = e / e.sum()
    return rows


def _ref_masked_ce(logits: np.ndarray, labels, idx: np.ndarray) -> float:
    total = 0.0
    for t in idx:
        row = logits[t] - logits[t].max()
        logp = row - math.log(np.exp(row).sum())
        if labels.ndim == 1:
            total -= logp[labels[t]]
        else:
            total -= float(labels[t] @ logp)
    return total


def dual_impl_loss_check(inst: TinyInstance | None = None) -> float:
    """Max |module - reference| over F and G on the fixture instance."""
    if inst is None:
        inst = build_tiny_instance(dtype=np.float64)
    f_mod, g_mod = _instance_losses(inst, inst.params)

    bundle = inst.bundle
    f_sum, g_sum = 0.0, 0.0
    batch = inst.x_clean.shape[0]
    for i in range(batch):
        x = inst.x_clean[i]
        xm = inst.x_masked[i]
        idx = np.asarray(inst.mask_idx[i])
        anchors = _ref_hard_labels(x, bundle.proj_anchor.matrix,
                                   bundle.codebook.entries)
        _, logits_m = _ref_forward_tap_logits(inst.params, inst.cfg, xm, inst.k)
        zk, _ = _ref_forward_tap_logits(inst.params, inst.cfg, x, inst.k)
        soft = _ref_soft_labels(zk, bundle.proj_enhance.matrix,
                                bundle.codebook.entries, bundle.tau,
                                inst.gumbel[0][i])
        g_sum += _ref_masked_ce(logits_m, anchors, idx)
        f_sum += _ref_masked_ce(logits_m, soft, idx)
    f_ref = f_sum / batch
    g_ref = g_sum / batch
    return max(abs(f_mod - f_ref), abs(g_mod - g_ref))


# ----------------------------------------------------------------------
# reference lower-only trainer

def lower_only_pretrain(cfg: TrainConfig, features: list,
                        out_dir=None) -> RunResult:
    """Plain masked-prediction training: anchors only, no label path.

    Mirrors run_pretrain's loop with the F term absent by construction.
    The gradient is w2 * grad(G). Gumbel noise is never drawn; role-keyed
    seed streams make that invisible to every other draw. Metrics columns
    that describe the enhanced path are written as 0.0.
    """
    prepared = _prepare_dataset(features, cfg)
    d_in = prepared[0].shape[1]
    bundles = [make_bundle(cfg.seed_quantizer, cfg.num_codes, cfg.code_dim,
                           d_in, cfg.encoder.dim_hidden, tau=cfg.tau,
                           l2_normalize=cfg.l2_normalize)]
    if cfg.num_codebooks != 1:
        raise ValueError("reference trainer supports a single codebook")
    anchors_cache = [[anchor_labels(x, bu) for x in prepared] for bu in bundles]
    util_anchor = codebook_utilization(np.concatenate(anchors_cache[0]),
                                       cfg.num_codes)
    params = init_encoder(cfg.encoder, dtype=cfg.np_dtype)
    params_t = params_to_tensors(params)
    opt = OptimizerState()
    names = param_names(cfg.encoder)
    w2 = cfg.weights.w2

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w",
                          encoding="utf-8", newline="\n")
        metrics_fh.write(METRICS_HEADER + "\n")

    from .encoder import forward_graph  # local import to keep header lean
    records = []
    n = len(prepared)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = seeding.rng(cfg.seed_data, seeding.ROLE_SHUFFLE,
                                epoch).permutation(n)
            for lo in range(0, n, cfg.batch_size):
                sel = order[lo: lo + cfg.batch_size]
                batch = [prepared[i] for i in sel]
                t_min = min(x.shape[0] for x in batch)
                xs = [x[:t_min] for x in batch]
                masked_rows = []
                mask_idx = []
                for i, x in enumerate(xs):
                    m = sample_mask(cfg.policy, t_min, (cfg.seed_mask, step, i))
                    mask_idx.append(m.indices)
                    masked_rows.append(
                        apply_mask(x.T, m, cfg.policy, (cfg.seed_mask, step, i)).T)
                x_masked = np.stack(masked_rows).astype(cfg.np_dtype)
                b = len(xs)
                flat_idx = np.concatenate(
                    [np.asarray(mask_idx[i]) + i * t_min for i in range(b)])
                anchor_flat = np.concatenate(
                    [anchors_cache[0][i][:t_min] for i in sel])

                _, logits = forward_graph(params_t, Tensor(x_masked), cfg.encoder)
                logits_flat = logits.reshape(b * t_min, cfg.num_codes)
                loss_g = masked_ce_graph(logits_flat, anchor_flat,
                                         flat_idx) * (1.0 / b)
                g_val = loss_g.item()
                loss_g.backward()
                combined = {nm: w2 * _grad_or_zero(params_t[nm]) for nm in names}
                for nm in names:
                    if not np.all(np.isfinite(combined[nm])):
                        raise NumericError(f"non-finite gradient in {nm} "
                                           f"at step {step}")
                sq = 0.0
                for nm in names:
                    gflat = combined[nm].ravel().astype(np.float64)
                    sq += float(np.dot(gflat, gflat))
                grad_norm = math.sqrt(sq)
                if cfg.clip_norm > 0 and grad_norm > cfg.clip_norm:
                    scale = cfg.clip_norm / grad_norm
                    for nm in names:
                        combined[nm] = combined[nm] * scale
                lr = lr_schedule(step, cfg)
                _apply_update(params_t, opt, combined, names, cfg, lr)

                pred = np.argmax(logits_flat.data[flat_idx], axis=1)
                rec = MetricsRecord(
                    step=step, epoch=epoch, loss_total=w2 * g_val,
                    loss_f=0.0, loss_g=g_val,
                    mask_acc_anchor=float(np.mean(pred == anchor_flat[flat_idx])),
                    mask_acc_enh=0.0, codebook_util_anchor=util_anchor,
                    codebook_util_enh=0.0, label_agreement=0.0,
                    grad_norm=grad_norm, lr=lr)
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(rec.to_csv_row() + "\n")
                    metrics_fh.flush()
                step += 1
            if out_dir is not None:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_epoch_{epoch:04d}.ckpt"),
                    {nm: t.data for nm, t in params_t.items()}, opt,
                    meta={"epochs_done": epoch + 1, "global_step": step})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return RunResult(params={nm: t.data for nm, t in params_t.items()},
                     opt=opt, records=records, checkpoint_paths=[],
                     bundles=bundles)
