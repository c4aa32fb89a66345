"""Small end-to-end demo: estimate a risk, fit mixtures, solve a robust problem, price insurance."""

import numpy as np

from entrisk import AmbiguityBall, EstimatorKind, InsuranceInstance, Norm, dro_solve_linear, estimate, solve_pricing
from entrisk.insurance import generate_market


def main():
    rng = np.random.default_rng(7)
    x = rng.gamma(10.0, 0.24, 500)
    for kind in (EstimatorKind.SAA, EstimatorKind.BS_MLE, EstimatorKind.BS_EVT):
        print(f"{kind.value:>8s}  {estimate(kind, x, 2.0, seed=1):.4f}")

    scen = rng.normal([-0.5, -0.2, 0.1], 1.0, size=(200, 3))
    for eps in (0.0, 0.1, 0.5):
        z, val = dro_solve_linear(scen, 1.0, AmbiguityBall(eps, Norm.L2), lower=0.0, upper=1.0)
        print(f"eps={eps:<4} value={val:.4f} z={np.round(z, 3)}")

    inst = InsuranceInstance(n=500)
    pol = solve_pricing(generate_market(inst, seed=3), inst, 1.0)
    print("coverage", np.round(pol.coverage, 3), "premiums", np.round(pol.premium, 3))


if __name__ == "__main__":
    main()
