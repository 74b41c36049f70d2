"""Central finite-difference verification of ``loss_and_grads``.

The check runs in float64: with float32 and h=1e-3, cancellation error in
``(L(w+h) - L(w-h)) / 2h`` is around 1e-4 relative, which is the same order
as the tolerance being verified.

ReLU and max-pool are piecewise linear. When a +-h perturbation moves a
pre-activation across zero or changes a pooling argmax, the difference
quotient straddles a kink and says nothing about the derivative. Such
coordinates are re-measured with a much smaller step; only if the kink is
still crossed is the coordinate reported as skipped.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn


def activation_pattern(net, x):
    """Tuple of ReLU masks and pooling argmax indices for a forward pass."""
    _, caches = nn._logits(net, x, False, None, keep_cache=True)
    out = []
    for spec, cache in zip(net.layers, caches):
        if spec.kind == "relu":
            out.append(cache)
        elif spec.kind == "maxpool2x2":
            out.append(cache[0])
    return out


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_refined: int = 0
    skipped: list = field(default_factory=list)
    worst: tuple = ()

    def passed(self, tol=1e-3):
        return self.max_rel_error <= tol


def rel_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric))
    return 0.0 if denom == 0 else abs(analytic - numeric) / denom


def check_gradients(net, x, labels, h=1e-3, fine_h=1e-7):
    """Compare every analytic gradient entry against central differences.

    ``net`` must not contain active dropout (the check is run in infer mode
    for the forward passes and train mode with rate-0 dropout otherwise).
    """
    net = net.astype(np.float64)
    x = np.asarray(x, np.float64)
    _, grads = nn.loss_and_grads(net, x, labels, train=False)
    base = activation_pattern(net, x)

    def loss_at(layer, k, j, value):
        p = net.params[layer][k]
        orig = p.flat[j]
        p.flat[j] = value
        loss, _ = nn.loss_and_grads(net, x, labels, train=False)
        pattern = activation_pattern(net, x)
        p.flat[j] = orig
        return loss, _same_pattern(pattern, base)

    worst, where = 0.0, ()
    n, refined, skipped = 0, 0, []
    for li, layer in enumerate(net.params):
        for k, p in enumerate(layer):
            for j in range(p.size):
                w = p.flat[j]
                step = h
                lp, ok_p = loss_at(li, k, j, w + step)
                lm, ok_m = loss_at(li, k, j, w - step)
                if not (ok_p and ok_m):
                    refined += 1
                    step = fine_h
                    lp, ok_p = loss_at(li, k, j, w + step)
                    lm, ok_m = loss_at(li, k, j, w - step)
                    if not (ok_p and ok_m):
                        skipped.append((li, k, j))
                        continue
                numeric = (lp - lm) / (2 * step)
                err = rel_error(float(grads[li][k].flat[j]), numeric)
                n += 1
                if err > worst:
                    worst, where = err, (li, k, j)
    return GradCheckResult(worst, n, refined, skipped, where)
