"""Brute-force reference implementations shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np


def bezier_bisection(value: float, points, tol: float = 1e-13) -> float:
    """Scalar Bezier evaluation: solve x(t) = value by plain bisection, return y(t)."""
    (x0, y0), (x1, y1), (x2, y2), (x3, y3) = [tuple(map(float, p)) for p in points]

    def bern(a, b, c, d, t):
        s = 1 - t
        return a * s * s * s + 3 * b * s * s * t + 3 * c * s * t * t + d * t * t * t

    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if bern(x0, x1, x2, x3, mid) < value:
            lo = mid
        else:
            hi = mid
    t = (lo + hi) / 2
    return min(1.0, max(0.0, bern(y0, y1, y2, y3, t)))


def window_multisets(x: np.ndarray, window) -> dict:
    """Sorted voxel values of every (clipped) window, keyed by window index."""
    out = {}
    wx, wy, wz = window
    nx, ny, nz = x.shape
    for i in range(0, nx, wx):
        for j in range(0, ny, wy):
            for k in range(0, nz, wz):
                out[(i, j, k)] = sorted(x[i:i + wx, j:j + wy, k:k + wz].ravel().tolist())
    return out


def union_mask(shape, blocks) -> np.ndarray:
    """Voxel-by-voxel membership in any of the (start, stop) boxes."""
    mask = np.zeros(shape, dtype=bool)
    for idx in np.ndindex(*shape):
        mask[idx] = any(all(a <= c < b for c, (a, b) in zip(idx, box)) for box in blocks)
    return mask


def mse_loop(recon: np.ndarray, target: np.ndarray) -> float:
    """Per-sample voxel mean of squared error, then the batch mean."""
    per_sample = []
    for b in range(recon.shape[0]):
        acc, n = 0.0, 0
        for v_r, v_t in zip(recon[b].ravel().tolist(), target[b].ravel().tolist()):
            acc += (v_r - v_t) ** 2
            n += 1
        per_sample.append(acc / n)
    return sum(per_sample) / len(per_sample)


def cross_entropy_loop(logits: np.ndarray, labels) -> float:
    total = 0.0
    for row, y in zip(logits.tolist(), list(labels)):
        m = max(row)
        log_z = m + math.log(sum(math.exp(v - m) for v in row))
        total += log_z - row[int(y)]
    return total / len(logits)


def adversarial_loop(d_ct, d_mri, eps: float = 1e-7) -> float:
    """The discriminator objective J (to be maximized)."""
    clamp = lambda v: min(1 - eps, max(eps, float(v)))  # noqa: E731
    j_ct = sum(math.log(clamp(v)) for v in d_ct) / len(d_ct)
    j_mri = sum(math.log(1 - clamp(v)) for v in d_mri) / len(d_mri)
    return j_ct + j_mri


def soft_dice_loop(scores: np.ndarray, target: np.ndarray, classes, smooth: float = 1e-5) -> float:
    """1 - mean soft dice over ``classes``; ``scores`` is class-first."""
    dices = []
    for c in classes:
        p = scores[c].ravel().tolist()
        g = (target.ravel() == c).astype(float).tolist()
        inter = sum(a * b for a, b in zip(p, g))
        dices.append((2 * inter + smooth) / (sum(p) + sum(g) + smooth))
    return 1 - sum(dices) / len(dices)


def welch_oracle(a, b):
    """Welch t statistic, Welch-Satterthwaite dof and two-sided p (numeric integration)."""
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((v - ma) ** 2 for v in a) / (na - 1)
    vb = sum((v - mb) ** 2 for v in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    dof = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, dof


def tercile_oracle(sizes):
    """Bucket by sorted rank: first third S, second M, rest L (remainders go to S, then M)."""
    n = len(sizes)
    base, rem = divmod(n, 3)
    n_s = base + (1 if rem >= 1 else 0)
    n_m = base + (1 if rem >= 2 else 0)
    order = sorted(range(n), key=lambda i: (sizes[i], i))
    out = [None] * n
    for rank, i in enumerate(order):
        out[i] = "S" if rank < n_s else ("M" if rank < n_s + n_m else "L")
    return out


class _PatternRecorder:
    """Records the branch taken by every piecewise-linear op during a forward pass.

    ReLU / leaky ReLU signs and max-pool argmax indices. Two passes with equal
    recordings lie on the same linear piece, so a difference quotient between
    them is a true derivative and not a kink artefact.
    """

    def __init__(self):
        import torch.nn.functional as F

        self._f = F
        self._orig = {name: getattr(F, name) for name in ("relu", "leaky_relu", "max_pool3d")}
        self.pattern = []

    def __enter__(self):
        F, orig = self._f, self._orig

        def relu(x, *a, **k):
            self.pattern.append((x > 0).flatten().clone())
            return orig["relu"](x, *a, **k)

        def leaky_relu(x, *a, **k):
            self.pattern.append((x > 0).flatten().clone())
            return orig["leaky_relu"](x, *a, **k)

        def max_pool3d(x, *a, **k):
            out, idx = orig["max_pool3d"](x, *a, **{**k, "return_indices": True})
            self.pattern.append(idx.flatten().clone())
            return out

        F.relu, F.leaky_relu, F.max_pool3d = relu, leaky_relu, max_pool3d
        return self

    def __exit__(self, *exc):
        for name, fn in self._orig.items():
            setattr(self._f, name, fn)


def _same_pattern(a, b) -> bool:
    import torch

    return len(a) == len(b) and all(torch.equal(u, v) for u, v in zip(a, b))


def central_difference_probes(loss_fn, params, n_probes: int, seed: int, step: float = 1e-4,
                              max_draws: int = 2000):
    """Numeric derivatives of ``loss_fn()`` w.r.t. ``n_probes`` random scalar entries.

    ``params`` is a list of ``(name, tensor)``; returns ``(name, index, numeric)``
    triples. An entry is only accepted when the activation pattern at +step and
    -step matches the unperturbed one, so no ReLU or pooling kink lies inside
    the difference interval. Each probed entry is restored bit-exactly.
    """
    import torch

    rng = np.random.default_rng(seed)
    out = []

    def run():
        with _PatternRecorder() as rec:
            value = float(loss_fn())
        return value, rec.pattern

    with torch.no_grad():
        _, base = run()
        for _ in range(max_draws):
            if len(out) == n_probes:
                break
            name, p = params[int(rng.integers(len(params)))]
            flat = p.view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + step
            up, pat_up = run()
            flat[i] = orig - step
            down, pat_down = run()
            flat[i] = orig
            if _same_pattern(base, pat_up) and _same_pattern(base, pat_down):
                out.append((name, i, (up - down) / (2 * step)))
    if len(out) < n_probes:
        raise RuntimeError(f"only {len(out)} kink-free probes in {max_draws} draws")
    return out


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def tiny_arch():
    from sar.model import Arch

    return Arch(depth=2, base_channels=2, input_shape=(8, 8, 4), sa_hidden=6, mial_channels=3, mial_hidden=5)


def gradient_suite(n_probes: int = 20, step: float = 1e-4, seed: int = 0) -> dict:
    """Max relative error of analytic vs central-difference gradients per loss.

    Float64 tiny network in train mode. Restoration probes E and D, scale
    probes E and S, adversarial probes M (analytic = d l_adv_d) and E
    (analytic = -d l_adv_d, the sign the reversal layer delivers).
    """
    import torch

    from sar.model import init_pretrain_model
    from sar.objectives import adversarial_losses, restoration_loss, scale_loss

    model = init_pretrain_model(tiny_arch(), seed).double().train()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 1, 8, 8, 4, generator=g, dtype=torch.float64)
    x_hat = (x + 0.2 * torch.rand(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    y_scale = torch.tensor([0, 1, 2, 0])
    is_ct = torch.tensor([True, False, True, False])

    def losses():
        out = model(x_hat, reversal=1.0)
        l_adv_d, _ = adversarial_losses(out["d"][is_ct], out["d"][~is_ct])
        return {
            "l_res": restoration_loss(out["recon"], x),
            "l_scale": scale_loss(out["scale_logits"], y_scale),
            "l_adv": l_adv_d,
        }

    groups = {k: [(f"{k}.{n}", p) for n, p in m.named_parameters()] for k, m in model.group_modules().items()}
    plan = {"l_res": ("E", "D"), "l_scale": ("E", "S"), "l_adv": ("E", "M")}
    report = {}
    for i, (key, names) in enumerate(plan.items()):
        params = [np for k in names for np in groups[k]]
        model.zero_grad(set_to_none=True)
        losses()[key].backward()
        analytic = {n: p.grad.detach().clone().view(-1) for n, p in params}
        probes = central_difference_probes(lambda: losses()[key].item(), params, n_probes, seed + i, step)
        errs = []
        for name, idx, numeric in probes:
            sign = -1.0 if key == "l_adv" and name.startswith("E.") else 1.0
            errs.append(relative_error(analytic[name][idx].item(), sign * numeric))
        report[key] = max(errs)
    model.zero_grad(set_to_none=True)
    return report


def reversal_direction_check(lr: float = 1e-3, seed: int = 0) -> tuple[float, float, float]:
    """(before, after M step, after E step) values of l_adv_d on a fixed batch."""
    import torch

    from sar.model import init_pretrain_model
    from sar.objectives import adversarial_losses

    model = init_pretrain_model(tiny_arch(), seed).double().eval()
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(6, 1, 8, 8, 4, generator=g, dtype=torch.float64)
    x[::2] *= 0.5  # CT samples darker
    is_ct = torch.tensor([True, False] * 3)

    def l_adv_d():
        d = model(x, reversal=1.0)["d"]
        return adversarial_losses(d[is_ct], d[~is_ct])[0]

    groups = model.param_groups()
    before = l_adv_d().item()
    opt_m = torch.optim.SGD(groups["M"], lr=lr)
    model.zero_grad(set_to_none=True)
    l_adv_d().backward()
    opt_m.step()
    after_m = l_adv_d().item()
    # Encoder step through the reversal layer with M frozen.
    for p in groups["M"]:
        p.requires_grad_(False)
    opt_e = torch.optim.SGD(groups["E"], lr=lr)
    model.zero_grad(set_to_none=True)
    l_adv_d().backward()
    opt_e.step()
    after_e = l_adv_d().item()
    return before, after_m, after_e
