"""Numerical verification: finite differences, brute-force oracles, suites.

Everything here is the independent side of a dual check: the brute-force
selection is compared against the fast path, central differences against the
reverse-mode tape, and the dynamic MAC counter against the analytic model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, cost, kernels, model, reorg
from .errors import BoundaryError, UsageError
from .kernels import Rng
from .model import ModelConfig
from .reorg import ReorgPlan
from .tokens import CLS_ORIGIN, PatchOrigin, TokenSequence

# Published GMAC figures the analytic model must reproduce:
# (preset, resolution, keep rate or None, expected G, relative tolerance,
#  expected reduction percent or None).
REFERENCE_GMACS = [
    ("deit-s", 224, None, 4.6, 0.02, None),
    ("deit-s", 224, 0.9, 4.0, 0.05, 13.0),
    ("deit-s", 224, 0.8, 3.5, 0.05, 24.0),
    ("deit-s", 224, 0.7, 3.0, 0.05, 35.0),
    ("deit-s", 224, 0.6, 2.6, 0.05, 43.0),
    ("deit-s", 224, 0.5, 2.3, 0.05, 50.0),
    ("deit-b", 224, None, 17.6, 0.02, None),
    ("deit-b", 224, 0.7, 11.55, 0.05, 35.0),
    ("deit-s", 304, 0.5, 4.4, 0.05, None),
]
REDUCTION_TOLERANCE_POINTS = 2.0
REORG_LOCATIONS = (4, 7, 10)

GRADCHECK_CONFIG = ModelConfig(depth=2, dim=8, heads=2, mlp_ratio=2.0,
                               patch=16, resolution=32, num_classes=2)
GRADCHECK_TOKENS = 6
GRADCHECK_PLAN = ReorgPlan.uniform([1], 0.5)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_jacobian(f, x: np.ndarray, h: float, guard=None) -> np.ndarray:
    """Central-difference Jacobian of a vector function.

    `guard`, when given, maps a probe point to a hashable selection
    signature; any coordinate whose two probes disagree raises
    BoundaryError instead of averaging across the discontinuity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UsageError("fd_jacobian expects a 1-D input vector")
    columns = []
    for i in range(x.size):
        plus = x.copy()
        plus[i] += h
        minus = x.copy()
        minus[i] -= h
        if guard is not None and guard(plus) != guard(minus):
            raise BoundaryError(f"selection flipped while probing coordinate {i}")
        columns.append((np.asarray(f(plus), dtype=np.float64)
                        - np.asarray(f(minus), dtype=np.float64)) / (2.0 * h))
    return np.stack(columns, axis=1)


def brute_force_selection(scores, kappa: float) -> tuple[list[int], list[int]]:
    """Exhaustive comparison-based top-K split (test oracle for select_tokens)."""
    scores = list(np.asarray(scores, dtype=np.float64))
    k = math.ceil(kappa * len(scores))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k], order[k:]


# ---------------------------------------------------------------------------
# Gradient check harness (toy encoder, full coordinate sweep)
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    seed: int
    max_rel_err: float
    coords_checked: int
    boundary_rejections: int


def _toy_instance(seed: int):
    rng = Rng(seed)
    w = model.init_random(GRADCHECK_CONFIG, rng)
    tokens = rng.normal(GRADCHECK_TOKENS * GRADCHECK_CONFIG.dim).reshape(
        GRADCHECK_TOKENS, GRADCHECK_CONFIG.dim)
    origins = (CLS_ORIGIN,) + tuple(PatchOrigin(0, i) for i in range(GRADCHECK_TOKENS - 1))
    return w, tokens, origins


def _signature_of(mask_trace) -> tuple:
    return tuple(frozenset(event.kept_indices) for event in mask_trace.events)


def gradient_check(seed: int, h: float = 1e-5) -> GradCheckResult:
    """Reverse-mode vs central differences over every participating coordinate.

    Relative error uses the customary unit floor:
    |fd - bp| / max(|fd|, |bp|, 1). Probes that flip any kept-token set are
    rejected and counted rather than averaged across the discontinuity.
    """
    w, tokens, origins = _toy_instance(seed)
    plan = GRADCHECK_PLAN
    record = autodiff.record_forward(TokenSequence(tokens.copy(), origins), w, plan)
    grads = record.gradients(autodiff.backward(record.tape, record.loss))
    base_sig = record.selection_signature()

    def run(token_matrix) -> tuple[float, tuple]:
        logits, _, mask_trace = model.encode(
            TokenSequence(token_matrix, origins), w, plan, record_maps=False)
        return logits[0], _signature_of(mask_trace)

    max_rel = 0.0
    checked = 0
    rejected = 0

    def probe_coord(array: np.ndarray, flat_index: int, grad_value: float) -> None:
        nonlocal max_rel, checked, rejected
        flat = array.reshape(-1)
        original = flat[flat_index]
        flat[flat_index] = original + h
        f_plus, sig_plus = run(tokens)
        flat[flat_index] = original - h
        f_minus, sig_minus = run(tokens)
        flat[flat_index] = original
        if sig_plus != base_sig or sig_minus != base_sig:
            rejected += 1
            return
        fd = (f_plus - f_minus) / (2.0 * h)
        rel = abs(fd - grad_value) / max(abs(fd), abs(grad_value), 1.0)
        max_rel = max(max_rel, rel)
        checked += 1

    for i in range(tokens.size):
        probe_coord(tokens, i, grads["tokens"].reshape(-1)[i])
    for name, tensor in w.tensors.items():
        if not (name.startswith("layers.") or name.startswith("final_norm.")
                or name.startswith("head.")):
            continue  # the token-level toy never runs patch embedding
        g = grads[name].reshape(-1)
        for i in range(tensor.size):
            probe_coord(tensor, i, g[i])
    return GradCheckResult(seed=seed, max_rel_err=max_rel, coords_checked=checked,
                           boundary_rejections=rejected)


def fusion_sensitivity_check(seed: int, h: float = 1e-5):
    """Frozen-score Jacobian of the fused token, plus the removal zero block.

    Returns (max deviation of each d x d block from a_i * I, True iff the
    removal-mode output has exactly zero sensitivity to inattentive values).
    """
    rng = Rng(seed)
    d = 6
    n_img = 5
    tokens = rng.normal((n_img + 1) * d).reshape(n_img + 1, d)
    scores = rng.uniform(n_img)
    kept_idx, dropped_idx = reorg.select_tokens(scores, 0.5)
    m = dropped_idx.size

    def fused_of(flat_inattentive: np.ndarray) -> np.ndarray:
        full = tokens.copy()
        full[dropped_idx + 1] = flat_inattentive.reshape(m, d)
        return reorg.fuse_inattentive(full, scores, dropped_idx)

    jac = fd_jacobian(fused_of, tokens[dropped_idx + 1].ravel(), h)
    max_err = 0.0
    for j, token_idx in enumerate(dropped_idx):
        block = jac[:, j * d:(j + 1) * d]
        max_err = max(max_err, np.abs(block - scores[token_idx] * np.eye(d)).max())

    origins = (CLS_ORIGIN,) + tuple(PatchOrigin(0, i) for i in range(n_img))

    def removal_of(flat_inattentive: np.ndarray) -> np.ndarray:
        full = tokens.copy()
        full[dropped_idx + 1] = flat_inattentive.reshape(m, d)
        out = reorg.reorganize(TokenSequence(full, origins), scores,
                               keep_rate=0.5, fusion=False)
        return out.tokens.ravel()

    removal_jac = fd_jacobian(removal_of, tokens[dropped_idx + 1].ravel(), h)
    return max_err, bool(np.all(removal_jac == 0.0))


# ---------------------------------------------------------------------------
# Verification suites (CLI-facing)
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    lines: list[str] = field(default_factory=list)

    def check(self, label: str, ok: bool, detail: str = "") -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
        status = "pass" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        self.lines.append(f"[{status}] {label}{suffix}")


def _naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for p in range(a.shape[1]):
                s += a[i, p].item() * b[p, j].item()
            out[i, j] = s
    return out


def _erf_series(x: float) -> float:
    total = 0.0
    term = x
    n = 0
    while abs(term) > 1e-18:
        total += term / (2 * n + 1)
        n += 1
        term *= -x * x / n
    return 2.0 / math.sqrt(math.pi) * total


def suite_kernels(seed: int, trials: int) -> SuiteResult:
    result = SuiteResult("kernels")
    rng = Rng(seed)

    ok = True
    for _ in range(min(trials, 50)):
        n, k, m = (rng.integer(6) + 1 for _ in range(3))
        a = rng.normal(n * k).reshape(n, k) * 10.0 ** (rng.integer(9) - 4)
        b = rng.normal(k * m).reshape(k, m)
        ok &= np.array_equal(kernels.matmul(a, b), _naive_matmul(a, b))
    result.check("matmul bitwise-equals naive triple loop", ok)

    spreads = rng.normal(trials * 8).reshape(trials, 8) * 200.0
    sums = kernels.softmax_rows(spreads).sum(axis=1)
    result.check("softmax rows sum to 1 under large spread",
                 bool(np.max(np.abs(sums - 1.0)) < 1e-12),
                 f"max |sum-1| = {np.max(np.abs(sums - 1.0)):.2e}")

    ok = True
    for _ in range(min(trials, 100)):
        v = np.round(rng.normal(12), 1)
        order = kernels.argsort_desc(v)
        oracle = sorted(range(v.size), key=lambda i: (-v[i], i))
        ok &= list(order) == oracle
    result.check("argsort_desc matches stable sort oracle (tie-heavy)", ok)

    x = rng.normal(40).reshape(5, 8)
    ln = kernels.layernorm(x, np.ones(8), np.zeros(8))
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    oracle = (x - mean) / np.sqrt(var + 1e-6)
    result.check("layernorm matches two-pass oracle",
                 bool(np.abs(ln - oracle).max() < 1e-12))

    pts = np.array([[0.0, 1.0, -1.0, 2.5]])
    g = kernels.gelu(pts)
    oracle = pts * 0.5 * (1.0 + np.vectorize(_erf_series)(pts / math.sqrt(2.0)))
    result.check("gelu matches erf-series oracle", bool(np.abs(g - oracle).max() < 1e-12))

    const = np.full((4, 4, 3), 0.625)
    result.check("bicubic preserves constants exactly",
                 bool(np.all(kernels.bicubic_resize(const, 9, 7) == 0.625)))
    img = rng.uniform(4 * 4 * 3).reshape(4, 4, 3)
    result.check("bicubic same-size resize is identity",
                 bool(np.abs(kernels.bicubic_resize(img, 4, 4) - img).max() < 1e-9))

    r1, r2 = Rng(seed + 1), Rng(seed + 1)
    result.check("rng: equal seeds give identical first 10^4 draws",
                 bool(np.array_equal(r1.uniform(10_000), r2.uniform(10_000))))
    return result


def suite_reorg(seed: int, trials: int) -> SuiteResult:
    result = SuiteResult("reorg")
    rng = Rng(seed)

    ok_sets = True
    ok_partition = True
    for t in range(trials):
        size = rng.integer(30) + 1
        scores = rng.uniform(size)
        if t % 5 == 0:
            scores = np.round(scores, 1)  # force ties
        kappa = (rng.integer(10) + 1) / 10.0
        kept, dropped = reorg.select_tokens(scores, kappa)
        oracle_kept, _ = brute_force_selection(scores, kappa)
        ok_sets &= set(kept.tolist()) == set(oracle_kept)
        ok_sets &= list(kept) == oracle_kept  # order, including stable ties
        ok_partition &= sorted(list(kept) + list(dropped)) == list(range(size))
    result.check("top-k selection matches brute-force oracle (sets and order)", ok_sets)
    result.check("kept/dropped partition the index range", ok_partition)

    scores = rng.uniform(9)
    kept_a, _ = reorg.select_tokens(scores, 0.4)
    kept_b, _ = reorg.select_tokens(scores * 7.25, 0.4)
    result.check("selection invariant under positive rescaling",
                 bool(np.array_equal(kept_a, kept_b)))

    tokens_x = rng.normal(6 * 5).reshape(6, 5)
    tokens_y = rng.normal(6 * 5).reshape(6, 5)
    sc = rng.uniform(5)
    _, dropped = reorg.select_tokens(sc, 0.4)
    fused_lin = reorg.fuse_inattentive(2.0 * tokens_x + 3.0 * tokens_y, sc, dropped)
    fused_sep = (2.0 * reorg.fuse_inattentive(tokens_x, sc, dropped)
                 + 3.0 * reorg.fuse_inattentive(tokens_y, sc, dropped))
    result.check("fusion is linear in token values",
                 bool(np.abs(fused_lin - fused_sep).max() < 1e-9))

    max_err, removal_zero = fusion_sensitivity_check(seed)
    result.check("fused-token Jacobian blocks equal score * identity",
                 max_err < 1e-6, f"max deviation {max_err:.2e}")
    result.check("removal mode has exactly zero sensitivity", removal_zero)

    schedule = reorg.WarmupSchedule(total_steps=1000, targets=(0.7,))
    grid = [reorg.keep_rate_at(schedule, t) for t in range(0, 1001)]
    result.check("warmup endpoints exact",
                 grid[0] == 1.0 and grid[-1] == 0.7)
    result.check("warmup monotone non-increasing",
                 all(a >= b for a, b in zip(grid, grid[1:])))

    result.check("placement formula: depth 12 / 3 layers",
                 reorg.plan_locations(12, 3) == [4, 7, 10])
    result.check("placement formula: depth 16 / 3 layers",
                 reorg.plan_locations(16, 3) == [5, 9, 13])
    return result


def suite_grads(seed: int, trials: int) -> SuiteResult:
    result = SuiteResult("grads")
    worst = 0.0
    rejected = 0
    checked = 0
    for t in range(trials):
        r = gradient_check(seed + t)
        worst = max(worst, r.max_rel_err)
        rejected += r.boundary_rejections
        checked += r.coords_checked
    result.check(
        f"reverse-mode vs central differences over {trials} toy instances",
        worst < 1e-5,
        f"max rel err {worst:.2e}, {checked} coords, {rejected} boundary-rejected")
    return result


def toy_cost_configs(seed: int) -> list[tuple[ModelConfig, ReorgPlan | None]]:
    return [
        (ModelConfig(2, 8, 2, 2.0, 8, 16, 3), ReorgPlan.uniform([1], 0.5)),
        (ModelConfig(4, 12, 3, 4.0, 8, 24, 5), ReorgPlan.uniform([2], 0.7)),
        (ModelConfig(3, 16, 4, 1.5, 8, 32, 4), ReorgPlan.uniform([1, 2], 0.6)),
        (ModelConfig(2, 8, 2, 2.0, 8, 16, 3), ReorgPlan.uniform([1], 0.5, fusion=False)),
        (ModelConfig(3, 8, 1, 2.0, 8, 24, 2), None),
        (ModelConfig(2, 6, 2, 3.0, 4, 12, 2), ReorgPlan.uniform([1], 0.9)),
    ]


def dynamic_vs_analytic(config: ModelConfig, plan: ReorgPlan | None, seed: int) -> tuple[int, int]:
    """(counted MACs of a real forward, analytic MACs) for one configuration."""
    rng = Rng(seed)
    w = model.init_random(config, rng)
    image = rng.uniform(config.resolution * config.resolution * 3).reshape(
        config.resolution, config.resolution, 3)
    with kernels.count_macs() as counter:
        model.forward(image, w, plan, record_maps=False)
    return counter.macs, cost.model_macs(config, plan).total_macs


def cost_regression_rows():
    """Evaluate the analytic model against every published reference point."""
    rows = []
    for preset, resolution, kappa, expect_g, tol, expect_red in REFERENCE_GMACS:
        config = model.PRESETS[preset].with_resolution(resolution)
        plan = ReorgPlan.uniform(REORG_LOCATIONS, kappa) if kappa is not None else None
        report = cost.model_macs(config, plan)
        baseline = cost.model_macs(config, None)
        reduction = report.reduction_vs(baseline)
        ok = abs(report.gmacs - expect_g) <= tol * expect_g
        if expect_red is not None:
            ok = ok and abs(reduction - expect_red) <= REDUCTION_TOLERANCE_POINTS
        rows.append({
            "preset": preset, "resolution": resolution, "kappa": kappa,
            "gmacs": report.gmacs, "expected_gmacs": expect_g,
            "delta_pct": 100.0 * (report.gmacs / expect_g - 1.0),
            "reduction_pct": reduction, "expected_reduction_pct": expect_red,
            "ok": ok,
        })
    return rows


def suite_cost(seed: int, trials: int) -> SuiteResult:
    result = SuiteResult("cost")
    for row in cost_regression_rows():
        kappa = "1.0 " if row["kappa"] is None else f"{row['kappa']:.1f}"
        label = (f"{row['preset']}@{row['resolution']} keep {kappa}: "
                 f"{row['gmacs']:.3f} G vs {row['expected_gmacs']} G "
                 f"({row['delta_pct']:+.2f}%)")
        if row["expected_reduction_pct"] is not None:
            label += (f", reduction {row['reduction_pct']:.1f}% vs "
                      f"{row['expected_reduction_pct']:.0f}%")
        result.check(label, row["ok"])

    for i, (config, plan) in enumerate(toy_cost_configs(seed)):
        counted, analytic = dynamic_vs_analytic(config, plan, seed + i)
        ok = abs(counted - analytic) <= 0.01 * analytic
        result.check(
            f"dynamic op counter vs analytic model (toy config {i + 1})", ok,
            f"counted {counted}, analytic {analytic}")

    config = model.DEIT_S
    totals = [cost.model_macs(config, ReorgPlan.uniform(REORG_LOCATIONS, k)).total_macs
              for k in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)]
    result.check("analytic model monotone in keep rate",
                 all(a <= b for a, b in zip(totals, totals[1:])))
    result.check("keep rate 1.0 equals plan-free model exactly",
                 totals[-1] == cost.model_macs(config, None).total_macs)
    return result


SUITES = {
    "kernels": suite_kernels,
    "reorg": suite_reorg,
    "grads": suite_grads,
    "cost": suite_cost,
}


def run_suites(names, seed: int, trials: int) -> list[SuiteResult]:
    return [SUITES[name](seed, trials) for name in names]
