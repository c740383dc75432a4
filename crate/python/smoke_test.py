#!/usr/bin/env python3
"""Smoke test for the tasksph_py extension module.

Build the module first:

    cargo build --release -p tasksph-py

then run this script; it locates the built cdylib, exposes it as an
importable module and exercises the main entry points.
"""

import math
import os
import shutil
import sys
import tempfile

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_module() -> str:
    candidates = [
        os.path.join(REPO_ROOT, "target", profile, "libtasksph_py.so")
        for profile in ("release", "debug")
    ]
    for c in candidates:
        if os.path.exists(c):
            return c
    sys.exit(
        "libtasksph_py.so not found; run `cargo build --release -p tasksph-py` first"
    )


def main() -> None:
    lib = locate_module()
    stage = tempfile.mkdtemp(prefix="tasksph_py_")
    shutil.copy(lib, os.path.join(stage, "tasksph_py.so"))
    sys.path.insert(0, stage)
    import tasksph_py as tp

    # Kernel: compact support and normalisation-scale sanity.
    w0, dw0 = tp.kernel_eval(0.0, 1.0)
    assert w0 > 0.0 and dw0 == 0.0
    w_edge, dw_edge = tp.kernel_eval(2.0, 1.0)
    assert w_edge == 0.0 and dw_edge == 0.0
    assert tp.kernel_dw_dh(2.5, 1.0) == 0.0

    # Equation of state: the vortex centre values.
    p, cs = tp.eos_update(1.0, 7.5)
    assert abs(p - 5.0) < 1e-12
    assert abs(cs - math.sqrt(5.0 / 3.0 * 5.0)) < 1e-12

    # Analytical profiles.
    v, p = tp.analytic_eval(0.2)
    assert abs(v - 1.0) < 1e-12
    v, p = tp.analytic_eval(0.5)
    assert v == 0.0 and abs(p - (3.0 + 4.0 * math.log(2.0))) < 1e-12

    # Device sizing formulas.
    n_off, m_t = tp.device_sizing(256**3, 2048, 262144)
    assert n_off == 131072 and m_t == 69206016

    # Initial conditions.
    ic = tp.gresho_ic(8)
    assert len(ic) == 512
    assert len(ic.positions()) == 512
    assert all(m > 0 for m in ic.masses())

    # A short end-to-end run in both modes; they must agree closely.
    summary_cpu, state_cpu = tp.run_simulation(
        resolution=12, t_end=0.003, mode="cpu", workers=2
    )
    summary_off, state_off = tp.run_simulation(
        resolution=12, t_end=0.003, mode="offload-host", workers=2
    )
    assert summary_cpu["steps"] >= 1
    assert summary_cpu["l1_v_theta"] < 0.05
    assert (
        abs(summary_cpu["l1_v_theta"] - summary_off["l1_v_theta"]) < 1e-6
    ), (summary_cpu, summary_off)
    assert summary_off["total_task_records"] > summary_cpu["total_task_records"]
    assert len(state_cpu) == 12**3 and len(state_off) == 12**3

    # Bad input surfaces as ValueError.
    try:
        tp.run_simulation(resolution=4)
    except ValueError:
        pass
    else:
        sys.exit("expected ValueError for a too-small resolution")

    print("tasksph_py smoke test passed")


if __name__ == "__main__":
    main()
