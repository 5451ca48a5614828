"""Severed dynamics on the FPU chain: energy drift, reversibility and locality.

Run with ``python3 demos/severed_dynamics.py``.
"""
import numpy as np

from anharmonic import dynamics as dyn
from anharmonic.dynamics import Configuration, IntegratorSchedule
from anharmonic.model import box_sites, reference_model


def main():
    model = reference_model("fpu-chain")
    rng = np.random.default_rng(7)

    # energy drift of Stormer-Verlet scales like h^2
    g = box_sites(1, 8)
    q = rng.standard_normal((g.n_sites, 1))
    p = rng.standard_normal((g.n_sites, 1))
    cfg = Configuration(q, p, g)
    print("h        max |H(t) - H(0)| / |H(0)|  (t = 10)")
    for h in (4e-2, 2e-2, 1e-2, 5e-3):
        traj = dyn.evolve(model, cfg, IntegratorSchedule(h, 10.0), snapshot_every=10)
        e = np.asarray(traj.energies)
        print(f"{h:<8g} {np.max(np.abs(e - e[0])) / abs(e[0]):.3e}")

    sched = IntegratorSchedule(1e-3, 1.0)
    back = dyn.evolve(model, dyn.time_reverse(dyn.evolve(model, cfg, sched).final), sched).final
    print(f"\ntime reversal round trip error: {np.max(np.abs(back.q - q)):.2e}")

    # distance at the origin between boxes of size a and a reference box
    big = box_sites(1, 16)
    qs = rng.standard_normal((8, big.n_sites, 1))
    ps = rng.standard_normal((8, big.n_sites, 1))
    tab = dyn.locality_experiment(model, Configuration(qs, ps, big), range(2, 13), t=1.0, h=1e-3,
                                  precision_bits=200)
    print("\ngamma  rms sup |q_a - q_ref|")
    for gam, err in zip(tab.gammas, tab.err_q):
        print(f"{gam:<6} {err:.3e}")


if __name__ == "__main__":
    main()
