"""
Two quantile heads instead of a variance head
=============================================

Fit a constant two-head model with the joint pinball loss, read off the
0.15 and 0.5 quantiles, and turn them into a mean and standard deviation.
"""

import numpy as np

from qrlesion import anomaly, losses, nn

rng = nn.make_rng(0)
y = 2.0 + 0.5 * rng.standard_normal((10_000, 1))  # N(2, 0.25)

# no trunk: with a zero input each head's output is just its bias
spec = nn.NetworkSpec((1,), [], {"L": [nn.Dense(1, 1)], "H": [nn.Dense(1, 1)]})
state = nn.init_params(spec, rng)
x = np.zeros_like(y)

for step in range(2000):
    out, cache = nn.forward(spec, state, x)
    lv = losses.joint_quantile_loss(out, y, 0.15, 0.5)
    grads, _ = nn.backward(spec, state, cache, {k: g / len(y) for k, g in lv.grad.items()})
    state = nn.adam_step(state, grads, 0.01)
    if step % 500 == 0:
        print(f"step {step:4d}  loss/n {lv.value / len(y):.4f}")

out, _ = nn.forward(spec, state, x[:1])
q_lo, q_med = out["L"][0, 0], out["H"][0, 0]
print(f"0.15-quantile {q_lo:.3f} (true {2 - 0.5 * 1.0364:.3f})")
print(f"median        {q_med:.3f} (true 2.000)")

# the gap between the two quantiles is z* standard deviations
mom = anomaly.quantiles_to_moments(np.array(q_med), np.array(q_lo), 0.15)
print(f"z* = {anomaly.normal_ppf(0.85):.4f}")
print(f"recovered mu {float(mom.mu):.3f}, sigma {float(mom.sigma):.3f} (true 2, 0.5)")
