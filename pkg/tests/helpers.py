import numpy as np


def random_features(rng: np.random.Generator, n: int) -> np.ndarray:
    """Feature vectors spread over the physical operating region."""
    return np.column_stack([
        rng.uniform(-2.0, 20.0, n),     # i_L
        rng.uniform(60.0, 120.0, n),    # v_Cf
        rng.uniform(150.0, 210.0, n),   # v_o
        rng.uniform(0.0, 23.0, n),      # i_ref
        rng.uniform(80.0, 140.0, n),    # V_in
        rng.uniform(1.5, 18.0, n),      # i_o
    ])


def _kink_free_batch(model, rng, n, margin):
    """Inputs whose hidden pre-activations all stay clear of zero by ``margin``."""
    keep = []
    while len(keep) < n:
        z = rng.normal(size=6)
        zn = (z - model.mean) / model.std
        if np.all(np.abs(model.w1 @ zn + model.b1) > margin * (1 + np.abs(zn).max())):
            keep.append(z)
    return np.array(keep)


def gradient_check(seed: int, hidden: int = 8, h: float = 1e-3) -> float:
    """Worst relative error of the analytic gradient against central differences.

    Runs in float64.  Inputs near a ReLU kink are rejected: a perturbation
    of size ``h`` could move a pre-activation across zero and the one-sided
    slopes would then disagree for reasons unrelated to the backward pass.
    """
    from fcdistill.policy import init_model, loss_and_grad

    rng = np.random.default_rng(seed)
    model = init_model(hidden, seed, rng.normal(size=6), rng.uniform(0.5, 2, 6)).astype(np.float64)
    model.b1 = rng.normal(size=hidden) * 0.1
    model.b2 = rng.normal(size=4) * 0.1
    z = _kink_free_batch(model, rng, 16, 10 * h)
    y = rng.integers(0, 4, 16)
    alpha = rng.uniform(0.5, 3.0, 4)
    _, grads = loss_and_grad(model, z, y, alpha)
    worst = 0.0
    for name, p in model.params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_and_grad(model, z, y, alpha)
            p[idx] = old - h
            lm, _ = loss_and_grad(model, z, y, alpha)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        g = grads[name]
        err = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)
        worst = max(worst, float(err.max()))
    return worst
