"""Pressure, entropy and the variational gap for the shipped models.

Run with ``python3 demos/thermodynamics.py``.
"""
import math

from anharmonic import thermo as th
from anharmonic.model import box_sites, reference_model


def main():
    betas = [0.25, 0.5, 1.0, 2.0, 4.0]
    fpu = reference_model("fpu-chain")
    g = box_sites(1, 4)
    mc = th.pressure_curve(fpu, betas, g, "MC", n_samples=50_000)
    quad = th.pressure_curve(fpu, betas, g, "quadrature")
    print("beta   p (MC)    p (quadrature)")
    for b, x, y in zip(betas, mc.p, quad.p):
        print(f"{b:<6g} {x:.5f}  {y:.5f}")

    # a harmonic site at beta = 1 has S = 1 + ln 2 pi
    print(f"\nharmonic site entropy {th.gaussian_entropy([[1.0, 0.0], [0.0, 1.0]]):.6f}"
          f"  vs 1 + ln 2 pi = {1 + math.log(2 * math.pi):.6f}")

    print("\nGibbs identity S - beta <H> - P on a small box")
    for name in ("harmonic-chain", "fpu-chain", "quartic-lattice-2d", "rotator-chain"):
        m = reference_model(name)
        r = th.gibbs_identity_check(m, 1.0, box_sites(m.nu, 1))
        print(f"  {name:<20} {r.value:+.4f} +- {r.stderr:.4f}")

    # the harmonic chain carries energy 1/beta per site, so e = 2 needs beta = 1/2
    curve = th.PressureCurve.from_function(
        [0.25 * 2 ** (k / 4) for k in range(25)], lambda b: th.harmonic_chain_pressure(1.0, b)["potential"])
    print(f"\ncompatible beta of the harmonic chain at e = 2: {th.compatible_beta(curve, 2.0).beta:.6f}")


if __name__ == "__main__":
    main()
