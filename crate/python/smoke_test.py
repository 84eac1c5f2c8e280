#!/usr/bin/env python3
"""Smoke test for the sora_py extension module.

Builds nothing itself: run `cargo build -p sora-python` first, then this
script copies the cdylib into a temp directory under the importable name
and exercises the bindings end to end.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_sora_py():
    candidates = [
        REPO / "target" / "debug" / "libsora_py.so",
        REPO / "target" / "release" / "libsora_py.so",
    ]
    lib = next((c for c in candidates if c.exists()), None)
    if lib is None:
        sys.exit("libsora_py.so not found; run `cargo build -p sora-python` first")
    stage = Path(tempfile.mkdtemp(prefix="sora_py_"))
    shutil.copy2(lib, stage / "sora_py.so")
    sys.path.insert(0, str(stage))
    import sora_py

    return sora_py


def check(name, cond):
    if not cond:
        sys.exit(f"FAIL: {name}")
    print(f"ok: {name}")


def approx(a, b, tol=1e-12):
    return abs(a - b) <= tol * (1.0 + max(abs(a), abs(b)))


def main():
    sp = import_sora_py()

    # Soft-threshold: shift outside the dead zone, exact zero inside it.
    t = sp.soft_threshold([3.0, -0.5, 0.05, 0.0], 0.1)
    check("soft_threshold shifts", approx(t[0], 2.9) and approx(t[1], -0.4))
    check("soft_threshold dead zone is exact", t[2] == 0.0 and t[3] == 0.0)

    # Prox step == gradient move then shrink, coordinate by coordinate.
    g, d, eta, lam = [0.8, -0.3, 0.02], [1.0, -2.0, 0.5], 0.1, 0.5
    moved = [gi - eta * di for gi, di in zip(g, d)]
    want = sp.soft_threshold(moved, eta * lam)
    got = sp.prox_gate_update(g, d, eta, lam)
    check("prox = move then shrink", all(a == b for a, b in zip(got, want)))

    # Rank-1 outer product: one singular value carries all the energy.
    m = [[2.0 * c for c in (1.0, 0.5, -1.0)], [1.0, 0.5, -1.0], [-3.0, -1.5, 3.0]]
    s = sp.svd_values(m)
    fro = math.sqrt(sum(v * v for row in m for v in row))
    check("svd rank-1", sp.numeric_rank(m) == 1 and approx(s[0], fro, 1e-10))

    # Adapter: layer_forward = w0 @ x + forward.
    w0 = [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]]
    a = sp.SoraAdapter(3, 2, 2, seed=7, w0=w0)
    check("fresh gates are ones", a.gate() == [1.0, 1.0])
    check("shape getters", (a.p, a.q, a.r_max) == (3, 2, 2))
    x = [[0.5, -1.0], [2.0, 0.25]]
    inc = a.forward(x)
    full = a.layer_forward(x)
    base = [[sum(w0[i][k] * x[k][j] for k in range(2)) for j in range(2)] for i in range(3)]
    check(
        "layer_forward adds the base",
        all(
            approx(full[i][j], base[i][j] + inc[i][j], 1e-12)
            for i in range(3)
            for j in range(2)
        ),
    )

    # Gate surgery and pruning: the compact module reproduces the increment.
    a.set_gate([0.0, 1.3])
    check("effective rank follows the gate", a.effective_rank() == 1)
    pruned = a.prune()
    check("pruned keeps one rank", pruned.retained_rank == 1)
    pinc = pruned.forward(x)
    ainc = a.forward(x)
    check(
        "pruned forward matches gated forward",
        all(approx(pinc[i][j], ainc[i][j], 1e-12) for i in range(3) for j in range(2)),
    )
    check("reprs name the types", "SoraAdapter" in repr(a) and "PrunedAdapter" in repr(pruned))

    # Bad input surfaces as ValueError, not a crash.
    try:
        sp.SoraAdapter(3, 2, 5, seed=0)
    except ValueError:
        print("ok: oversized r_max raises ValueError")
    else:
        sys.exit("FAIL: oversized r_max accepted")

    # One-call experiment: train, prune, report.
    r = sp.run_planted(16, 16, 1, 4, epochs=60, seed=3, n_train=64, n_eval=32)
    check(
        "run_planted returns the advertised keys",
        {"train_loss", "eval_loss", "gate", "effective_rank", "noise_floor",
         "nonzero_params", "nonzero_params_pruned"} <= set(r),
    )
    check("losses are finite", math.isfinite(r["train_loss"]) and math.isfinite(r["eval_loss"]))
    check("training actually fits", r["train_loss"] < 1.0)
    check("pruning never grows the model", r["nonzero_params_pruned"] <= r["nonzero_params"])
    r2 = sp.run_planted(16, 16, 1, 4, epochs=60, seed=3, n_train=64, n_eval=32)
    check("same seed, same run", r2["eval_loss"] == r["eval_loss"] and r2["gate"] == r["gate"])

    print("all smoke tests passed")


if __name__ == "__main__":
    main()
