"""Verification harness: finite-difference gradient checks, shape suite,
loop-based attention oracle and analytic attention-size accounting."""

from __future__ import annotations

import contextlib
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .decoder import InvPTDecoder, MultiTaskSeq, plan_stages
from .tensor import Rng, Tensor

# ---------------------------------------------------------------- gradcheck


@dataclass
class GradcheckResult:
    passed: bool
    worst_error: float
    worst_name: str = ""
    worst_index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    skipped: int = 0  # coordinates whose stencil straddles a ReLU kink

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status} checked={self.checked} skipped={self.skipped} worst_rel_err={self.worst_error:.3e} "
            f"at {self.worst_name}{list(self.worst_index)} analytic={self.analytic:.6e} numeric={self.numeric:.6e}"
        )


_STENCILS = {
    2: ((1, 0.5),),
    4: ((1, 2.0 / 3.0), (2, -1.0 / 12.0)),
}


@contextlib.contextmanager
def relu_masks(record: list):
    """Append the activation pattern of every ReLU evaluated inside the block."""
    orig = tn.relu

    def watched(x: Tensor) -> Tensor:
        record.append(x.data > 0)
        return orig(x)

    tn.relu = watched
    try:
        yield record
    finally:
        tn.relu = orig


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4,
              samples: int = 32, seed: int = 0, order: int = 2) -> GradcheckResult:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    Up to ``samples`` random coordinates are checked per tensor (all of them when
    the tensor is smaller). Error is ``|a - n| / (|a| + 1e-8)``. ``order`` picks
    the symmetric stencil: 2 uses f(x +- h), 4 adds f(x +- 2h) and cancels the
    h^2 truncation term. A coordinate whose stencil flips any ReLU activation
    sits on a kink where no derivative exists; it is counted in ``skipped``
    rather than compared.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 tensors, {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None
    base: list = []
    with tn.use_tape(tn.Tape()), relu_masks(base):
        loss = fn()
        tn.backward(loss)
    rng = np.random.default_rng(seed)
    worst = GradcheckResult(True, 0.0)
    checked = skipped = 0
    with tn.no_grad():
        for name, t in tensors.items():
            grad = np.zeros(t.shape) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= samples else rng.choice(flat.size, samples, replace=False)
            for i in idx:
                orig = flat[i]
                num, kink = 0.0, False
                for m, c in _STENCILS[order]:
                    for sign in (1, -1):
                        seen: list = []
                        flat[i] = orig + sign * m * h
                        with relu_masks(seen):
                            f = fn().item()
                        flat[i] = orig
                        if not np.isfinite(f):
                            raise tn.NonFiniteError(f"non-finite loss while perturbing {name}")
                        kink = kink or not _same_pattern(base, seen)
                        num += sign * c * f / h
                if kink:
                    skipped += 1
                    continue
                ana = float(grad.reshape(-1)[i])
                err = abs(ana - num) / (abs(ana) + 1e-8)
                checked += 1
                if err > worst.worst_error:
                    worst = GradcheckResult(True, err, name, np.unravel_index(i, t.shape), ana, num)
    worst.checked, worst.skipped = checked, skipped
    worst.passed = checked > 0 and worst.worst_error < tol
    return worst


def _wrong_softmax(m: Tensor) -> Tensor:
    """Softmax whose backward drops the normalisation term (negative control)."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    y = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return tn._result(y, (m,), lambda g: (y * g,))


@contextlib.contextmanager
def corrupted_backward():
    """Swap in a softmax with a wrong gradient rule."""
    orig = tn.softmax_rows
    tn.softmax_rows = _wrong_softmax
    try:
        yield
    finally:
        tn.softmax_rows = orig


def build_decoder_case(T: int, H0: int, W0: int, C0: int, seed: int = 0, c_enc: int = 4,
                       num_stages: int = 3, batch: int = 1, use_amp: bool = True, efa=(True, True, True),
                       dtype=np.float64):
    """A standalone decoder plus random F^c and aligned taps, all in ``dtype``."""
    with tn.precision(dtype):
        rng = Rng(seed)
        dec = InvPTDecoder(T, H0, W0, C0, c_enc, rng, num_stages, use_amp, efa)
        dec.name_parameters()
        f0 = Tensor(rng.normal((batch, T * H0 * W0, C0), 1.0))
        taps = [Tensor(rng.normal((batch, c_enc) + p.work_hw, 1.0)) for p in dec.plans]
    return dec, f0, taps


def gradcheck_decoder(T: int = 2, H0: int = 2, W0: int = 2, C0: int = 8, h: float = 1e-5, tol: float = 1e-4,
                      samples: int = 32, seed: int = 0, order: int = 4, batch: int = 2) -> GradcheckResult:
    """Stage 0 + UP-Transformer stack with AMP and EFA, all parameters and inputs checked.

    With ``batch=1`` and H0=2 the stage-0 context is a single pixel, so batch norm
    cancels some weights exactly and their numeric gradient is pure roundoff.
    """
    dec, f0, taps = build_decoder_case(T, H0, W0, C0, seed, batch=batch)
    for stage in dec.stages:
        if stage.use_amp:
            stage.alpha1.data[...] = 0.8
            stage.alpha2.data[...] = 0.6
    weights = [Tensor(np.random.default_rng(seed + 1).standard_normal(o.shape))
               for o in _stage_outputs(dec, f0, taps)]

    def fn():
        outs = _stage_outputs(dec, f0, taps)
        total = None
        for o, wgt in zip(outs, weights):
            term = tn.mean(tn.mul(o, wgt))
            total = term if total is None else tn.add(total, term)
        return total

    tensors = dict(dec.named_parameters())
    tensors["input.F_c"] = f0
    tensors.update({f"input.tap{s}": t for s, t in enumerate(taps)})
    return gradcheck(fn, tensors, h, tol, samples, seed, order)


def _stage_outputs(dec: InvPTDecoder, f0: Tensor, taps: list[Tensor]) -> list[Tensor]:
    seq = MultiTaskSeq(f0, dec.plans[0].T, dec.plans[0].H0, dec.plans[0].W0)
    return [o.data for o in dec.run_stages(seq, taps)]


def gradcheck_linear(h: float = 1e-5, tol: float = 1e-6, seed: int = 0) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 5)))
    w = Tensor(rng.standard_normal((5, 3)))
    b = Tensor(rng.standard_normal(3))
    r = Tensor(rng.standard_normal((4, 3)))
    return gradcheck(lambda: tn.sum_(tn.mul(tn.add(tn.matmul(x, w), b), r)), {"x": x, "w": w, "b": b}, h, tol)


# ---------------------------------------------------------------- shape suite


@dataclass
class ShapeReport:
    rows: list[tuple[int, str, tuple, tuple]] = field(default_factory=list)
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and all(exp == obs for _, _, exp, obs in self.rows)

    def to_text(self) -> str:
        lines = []
        for s, name, exp, obs in self.rows:
            flag = "ok" if exp == obs else "MISMATCH"
            lines.append(f"stage={s} {name:<8} expected={exp} observed={obs} {flag}")
        if self.error:
            lines.append(f"error={self.error}")
        lines.append(f"shape_suite {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "tensor", "exp_rows", "exp_cols", "obs_rows", "obs_cols", "pass"])
        for s, name, exp, obs in self.rows:
            w.writerow([s, name, exp[0], exp[1], obs[0], obs[1], int(exp == obs)])
        return buf.getvalue()


def expected_shapes(T: int, H0: int, W0: int, C0: int, s: int) -> dict[str, tuple[int, int]]:
    """Q/K/V/A/M/F shapes written out from the published per-stage table."""
    base = T * H0 * W0
    q_rows = {0: base // 4, 1: base, 2: 4 * base}[s]
    ch = {0: C0, 1: C0 // 2, 2: C0 // 4}[s]
    kv = base // 4
    out = {
        "Q": (q_rows, ch),
        "K": (kv, ch),
        "V": (kv, ch),
        "A": (q_rows, kv),
        "F_prime": ({0: base, 1: 4 * base, 2: 16 * base}[s], ch),
        "F_next": ({0: base, 1: 4 * base, 2: 16 * base}[s], ch),
    }
    if s >= 1:
        # score formula for up-sampling stages, with stage input H_s = H0 * 2**(s-1), k_s = 2**(s+1)
        hs, ws, ks = H0 * 2 ** (s - 1), W0 * 2 ** (s - 1), 2 ** (s + 1)
        out["A_eq"] = (T * hs * ws, 4 * T * hs * ws // ks**2)
        out["M"] = out["A_eq"]
    return out


def shape_suite(T: int = 3, H0: int = 8, W0: int = 8, C0: int = 64, seed: int = 0) -> ShapeReport:
    report = ShapeReport()
    try:
        dec, f0, taps = build_decoder_case(T, H0, W0, C0, seed, dtype=np.float32)
    except ValueError as exc:
        report.error = str(exc)
        return report
    with tn.no_grad():
        _stage_outputs(dec, f0, taps)
    for stage in dec.stages:
        s = stage.plan.s
        tr = stage.last_trace
        for name, exp in expected_shapes(T, H0, W0, C0, s).items():
            key = "A" if name == "A_eq" else name
            report.rows.append((s, name, exp, tr.shape(key)))
    return report


# ---------------------------------------------------------------- attention oracle


def _loop_conv_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 pad-1 cross-correlation, C x H x W -> O x H/2 x W/2."""
    c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = (h + 2 - 3) // 2 + 1, (wd + 2 - 3) // 2 + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for di in range(3):
                        for dj in range(3):
                            y, xx = 2 * i + di - 1, 2 * j + dj - 1
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += x[ic, y, xx] * w[oc, ic, di, dj]
                out[oc, i, j] = acc
    return out


def _loop_pool(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        acc += x[ch, i * k + a, j * k + b]
                out[ch, i, j] = acc / (k * k)
    return out


def _loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _lerp_weights(n: int):
    res = []
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        res.append((i0, i1, src - i0))
    return res


def _loop_message(a_prev: np.ndarray, T: int, hp: int, wp: int) -> np.ndarray:
    """Task-wise bilinear 2x upsampling of score rows, columns carried along."""
    cols = a_prev.shape[1]
    out = np.zeros((T * 4 * hp * wp, cols))
    wy, wx = _lerp_weights(hp), _lerp_weights(wp)
    for t in range(T):
        for y in range(2 * hp):
            y0, y1, fy = wy[y]
            for x in range(2 * wp):
                x0, x1, fx = wx[x]
                r = t * 4 * hp * wp + y * 2 * wp + x
                for c in range(cols):
                    def at(i, j):
                        return a_prev[t * hp * wp + i * wp + j, c]

                    out[r, c] = ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1))
                                 + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)))
    return out


def _loop_softmax(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        mx = max(a[i])
        e = [math.exp(v - mx) for v in a[i]]
        s = sum(e)
        for j in range(a.shape[1]):
            out[i, j] = e[j] / s
    return out


def _task_maps(rows: np.ndarray, T: int, h: int, w: int) -> list[np.ndarray]:
    """Rows (T*h*w x C) -> list of C x h x w maps, by explicit indexing."""
    c = rows.shape[1]
    maps = []
    for t in range(T):
        m = np.zeros((c, h, w))
        for y in range(h):
            for x in range(w):
                m[:, y, x] = rows[t * h * w + y * w + x]
        maps.append(m)
    return maps


def _flac(maps: list[np.ndarray]) -> np.ndarray:
    c, h, w = maps[0].shape
    rows = np.zeros((len(maps) * h * w, c))
    for t, m in enumerate(maps):
        for y in range(h):
            for x in range(w):
                rows[t * h * w + y * w + x] = m[:, y, x]
    return rows


def oracle_stage(fp: np.ndarray, stage, a_prev: np.ndarray | None, k_s: int | None = None) -> dict[str, np.ndarray]:
    """Recompute Q, K, V, scores, message, blend, softmax and context with loops."""
    plan = stage.plan
    T, (h, w) = plan.T, plan.work_hw
    k = plan.k_s if k_s is None else k_s
    c = plan.work_channels
    maps = _task_maps(fp, T, h, w)
    qw, qb = stage.q_conv.weight.data, stage.q_conv.bias.data
    q_in = _flac([_loop_conv_s2(m, qw, qb) for m in maps])
    kv_in = _flac([_loop_pool(m, k) for m in maps])
    q = _loop_matmul(q_in, stage.wq.weight.data)
    kk = _loop_matmul(kv_in, stage.wk.weight.data)
    v = _loop_matmul(kv_in, stage.wv.weight.data)
    a = _loop_matmul(q, kk.T) / math.sqrt(c)
    res = {"Q": q, "K": kk, "V": v, "A": a}
    if stage.use_amp and a_prev is not None:
        qh, qww = plan.q_hw
        msg = _loop_message(a_prev, T, qh // 2, qww // 2) if a_prev.shape[1] == a.shape[1] else np.full((1, 1), np.nan)
        res["M"] = msg
        al1, al2 = float(stage.alpha1.data[0]), float(stage.alpha2.data[0])
        blend = al1 * a + al2 * msg if msg.shape == a.shape else np.full((1, 1), np.nan)
    else:
        blend = a
    res["A_blend"] = blend
    res["A_m"] = _loop_softmax(blend) if np.all(np.isfinite(blend)) else blend
    res["ctx"] = _loop_matmul(res["A_m"], v) if res["A_m"].shape[1] == v.shape[0] else np.full((1, 1), np.nan)
    return res


def _deviation(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape or not np.all(np.isfinite(b)):
        return float("inf")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


@dataclass
class OracleReport:
    deviations: dict[str, float]
    tol: float = 1e-5

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values())

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tol

    def to_text(self) -> str:
        lines = [f"{k}={v:.3e}" for k, v in self.deviations.items()]
        lines.append(f"attention_oracle {'PASS' if self.passed else 'FAIL'} max_dev={self.max_deviation:.3e}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        return "quantity,max_abs_deviation\n" + "".join(f"{k},{v!r}\n" for k, v in self.deviations.items())


def attention_oracle(T: int = 2, H0: int = 4, W0: int = 4, C0: int = 16, seed: int = 0, zero_input: bool = False,
                     k_override: Callable[[int], int] | None = None, tol: float = 1e-5) -> OracleReport:
    """Engine path vs explicit loops for Q/K/V construction, scores, AMP, softmax and context."""
    dec, f0, taps = build_decoder_case(T, H0, W0, C0, seed)
    for stage in dec.stages:
        if stage.use_amp:
            stage.alpha1.data[...] = 0.7
            stage.alpha2.data[...] = 1.3
    if zero_input:
        f0.data[...] = 0
        for t in taps:
            t.data[...] = 0
    with tn.no_grad():
        _stage_outputs(dec, f0, taps)
    devs = {}
    a_prev = None
    for stage in dec.stages:
        s = stage.plan.s
        tr = stage.last_trace.tensors
        fp = tr["F_prime"].data[0]
        ref = oracle_stage(fp, stage, a_prev, None if k_override is None else k_override(s))
        engine = {k: tr[k].data[0] for k in ("Q", "K", "V", "A", "A_blend", "A_m")}
        if "M" in tr:
            engine["M"] = tr["M"].data[0]
        engine["ctx"] = np.matmul(tr["A_m"].data[0], tr["V"].data[0])
        for key, val in engine.items():
            devs[f"stage{s}.{key}"] = _deviation(val, ref.get(key, np.full((1, 1), np.nan)))
        # residual: F_{s+1} = Reshape_Up(context) + F'_s
        devs[f"stage{s}.residual"] = _deviation(tr["F_next"].data[0], tr["R"].data[0] + fp)
        a_prev = ref["A_blend"]
    return OracleReport(devs, tol)


# ---------------------------------------------------------------- complexity


@dataclass
class ComplexityReport:
    stages: list[dict[str, int]]

    def to_text(self) -> str:
        lines = [
            f"stage={r['stage']} A={r['rows']}x{r['cols']} elements={r['elements']} "
            f"vanilla={r['vanilla']} activations={r['activations']}"
            for r in self.stages
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        keys = ["stage", "rows", "cols", "elements", "vanilla", "activations"]
        return ",".join(keys) + "\n" + "".join(",".join(str(r[k]) for k in keys) + "\n" for r in self.stages)


def complexity_report(T: int = 3, H0: int = 8, W0: int = 8, C0: int = 64, num_stages: int = 3) -> ComplexityReport:
    """Analytic attention sizes; nothing is allocated.

    ``vanilla`` is the size of a full query-by-query score matrix at the same
    query count; ``activations`` counts elements of F'_s plus the score matrix.
    """
    rows_out = []
    for p in plan_stages(T, H0, W0, C0, num_stages):
        rows, cols = p.q_rows, p.kv_tokens
        rows_out.append({
            "stage": p.s,
            "rows": rows,
            "cols": cols,
            "elements": rows * cols,
            "vanilla": rows * rows,
            "activations": p.work_rows * p.work_channels + rows * cols,
        })
    return ComplexityReport(rows_out)
