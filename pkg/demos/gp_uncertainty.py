"""
Weighted GP posterior and its uncertainty
=========================================

"""

import numpy as np
import torch

from wgpnn.gp import KernelParams, gp_posterior, predict_scores, uce_loss_approx, uce_loss_mc

# three pseudo-points for one candidate: time offset, logit, weight
tau = np.array([0.3, 0.7, 1.1])
y = np.array([2.0, 1.5, 0.5])
w = np.array([0.9, 0.9, 0.2])

grid = np.linspace(0, 6, 13)
post = gp_posterior(tau, y, w, grid, KernelParams(gamma=1.0))
print("tau    mean     var")
for t, m, v in zip(grid, post.mean.numpy(), post.var.numpy()):
    print(f"{t:4.1f} {m:8.4f} {v:8.4f}")

# far from the points the variance is back at the prior
print("variance at tau=6:", post.var[-1].item())

# the point at 1.1 has y = 0.5; with low weight the mean stays closer to its neighbours
strong = gp_posterior(tau, y, np.array([0.9, 0.9, 0.9]), [1.1]).mean.item()
weak = gp_posterior(tau, y, w, [1.1]).mean.item()
print(f"mean at 1.1 with weight 0.9: {strong:.4f}, with weight 0.2: {weak:.4f}")

# two candidates scored at one query offset
points = [(tau, y, w), ([0.5], [0.8], [0.6])]
scores = predict_scores(points, 0.8)
print("means", scores.mean.numpy(), "vars", scores.var.numpy(), "probs", scores.probs.numpy())

# closed-form loss against Monte Carlo
mean, var = scores.mean.numpy(), scores.var.numpy()
mc, se = uce_loss_mc(mean, var, 0, samples=200_000)
print(f"uce closed form {uce_loss_approx(torch.tensor(mean), torch.tensor(var), 0).item():.4f}, monte carlo {mc:.4f} +- {se:.4f}")
