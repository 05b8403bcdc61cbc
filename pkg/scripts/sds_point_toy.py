"""Point-cloud SDS against a Dirac oracle: mean distance to target per step.

Compares Adam with plain gradient descent at a few step sizes. The oracle's
expected gradient is a contraction toward the target, so the gap between the
optimizers comes down to how far each one moves per step.
"""
import argparse

import numpy as np

from gsgen.guidance import DiracPointOracle, ddpm_schedule, sds_point_grad
from gsgen.optim import Adam


def run(step_fn, steps, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, (256, 3))
    target = rng.uniform(-1, 1, (256, 3))
    sched = ddpm_schedule()
    oracle = DiracPointOracle(target, sched)
    trace = [np.linalg.norm(p - target, axis=1).mean()]
    for _ in range(steps):
        t = sched.sample_t(rng)
        p = step_fn(p, sds_point_grad(oracle, p, t, rng.standard_normal(p.shape), sched))
        trace.append(np.linalg.norm(p - target, axis=1).mean())
    return trace


def adam(lr):
    opt = Adam({"p": lr})

    def step(p, g):
        params = {"p": p}
        opt.update(params, {"p": g})
        return params["p"]
    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    runs = {f"adam {lr:g}": adam(lr) for lr in (1e-3, 1e-2)}
    runs.update({f"gd {lr:g}": (lambda lr: lambda p, g: p - lr * g)(lr) for lr in (1e-2, 1e-1)})
    print(f"{'optimizer':<12}{'start':>10}{'end':>12}{'ratio':>12}")
    for name, fn in runs.items():
        tr = run(fn, args.steps, args.seed)
        print(f"{name:<12}{tr[0]:>10.3f}{tr[-1]:>12.3e}{tr[0] / tr[-1]:>12.1f}")


if __name__ == "__main__":
    main()
