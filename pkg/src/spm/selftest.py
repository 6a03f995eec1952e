"""Quick built-in oracle checks run by ``spm selftest``."""

from __future__ import annotations

import time

import numpy as np

from .codebook import Codebook, build_constraint_graph, validate_sequence
from .decompose import solve_mueller, split_reflections
from .dense import directed_cost
from .io import decode_psi, encode_psi
from .polcore import PolarimetricImage
from .reflectance import diffuse_dolp, max_aolp_modulation


def _codebook():
    g = build_constraint_graph(k=7, n=4)
    cb = Codebook.generate()
    rep = validate_sequence(cb.sequence, cb.params)
    return len(g.nodes) == 84 and g.edge_count == 252 and len(cb.sequence) == 255 and rep.ok \
        and rep.coverage_count == 252


def _modulation():
    bounds = {2.0: 2.9, 3.0: 4.3, 5.0: 7.3}
    return all(max_aolp_modulation(r, 0.05) <= b + 0.05 for r, b in bounds.items())


def _dolp():
    return bool(np.all(diffuse_dolp(np.arange(0.0, 45.0, 0.1), 1.5) < 0.05))


def _psi():
    rng = np.random.default_rng(1)
    img = PolarimetricImage(rng.normal(size=(5, 7, 3, 3)).astype(np.float32))
    data = encode_psi(img)
    return encode_psi(decode_psi(data)) == data


def _affine_cost():
    # the closed form against a generic least-squares fit of the same model
    rng = np.random.default_rng(2)
    for _ in range(50):
        y, x = rng.normal(size=(2, 12))
        a = np.stack([x, np.tile([1.0, 0.0], 6), np.tile([0.0, 1.0], 6)], axis=1)
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        if not np.isclose(directed_cost(y, x), np.sum((a @ coef - y) ** 2), rtol=1e-9, atol=1e-12):
            return False
    return True


def _mueller():
    rng = np.random.default_rng(3)
    c_s, c_d, md10, md20 = 0.3, 0.7, 0.02, -0.01
    ang = np.radians([0.0, 40.0, 80.0])
    inc = np.stack([np.ones(3), np.cos(2 * ang), np.sin(2 * ang)], axis=1) * rng.uniform(0.5, 1.0, (3, 1))
    m = np.array([[c_s + c_d, c_d * md10, -c_d * md20],
                  [c_d * md10, c_s, 0.0],
                  [c_d * md20, 0.0, -c_s]])
    sp = split_reflections(solve_mueller(inc, inc @ m.T))
    got = np.array([np.ravel(v)[0] for v in (sp.c_s, sp.c_d, sp.md10, sp.md20)])
    return np.allclose(got, [c_s, c_d, md10, md20], rtol=1e-9, atol=1e-12)


CHECKS = [
    ("codebook counts 84/252/255", _codebook),
    ("AoLP modulation bounds", _modulation),
    ("diffuse DoLP below 0.05 under 45 deg", _dolp),
    ("PSI round trip", _psi),
    ("affine cost closed form", _affine_cost),
    ("reduced Mueller recovery", _mueller),
]


def run_selftest(out=print) -> bool:
    ok = True
    for name, check in CHECKS:
        t0 = time.perf_counter()
        try:
            passed = bool(check())
        except Exception as e:  # report and continue
            passed = False
            name = f"{name} ({type(e).__name__}: {e})"
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name} [{time.perf_counter() - t0:.2f}s]")
    return ok
