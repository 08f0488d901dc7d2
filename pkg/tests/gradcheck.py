"""Central-difference check of the full objective through the model."""

from __future__ import annotations

import numpy as np

from casc import loss, model


def tiny_problem(seed=0, size=16, ch=4, class_count=4):
    rng = np.random.default_rng(seed)
    state = model.init_model(seed, ch=ch, class_count=class_count)
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    x = model.make_input(image, 1, class_count)
    y = np.zeros((size, size), dtype=np.uint8)
    y[3:9, 4:10] = 1
    y[11:14, 2:6] = 1
    return state, x, y


def max_relative_error(state, x, y, settings: loss.LossSettings, h=1e-5):
    """Largest ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    over every parameter entry. Step constants (indices, weight map) are
    frozen at the unperturbed point."""
    out = model.forward(state, x)
    obj = loss.total_loss(out.p, out.f_D, y, settings)
    state.zero_grad()
    model.backward(state, obj.grad_p, obj.grad_f_D)
    analytic = {k: v.copy() for k, v in state.grads.items()}

    def value():
        o = model.forward(state, x, keep_cache=False)
        return loss.total_loss(o.p, o.f_D, y, settings, frozen=obj.frozen, need_grad=False).breakdown.total

    worst = 0.0
    for name, arr in state.params.items():
        flat = arr.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * h)
            rel = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst, obj
