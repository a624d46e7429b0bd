"""Shared fixtures: process tensors are built once per session and saved to a
temporary directory; acceptance outcomes are collected for the summary."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import RESULTS
from ptcontrol import process_tensor as ptmod
from ptcontrol.bath import BathSpec, eta_coefficients
from ptcontrol.process_tensor import CouplingSpec, build_influence_tensors, build_process_tensor
from ptcontrol.tensornet import TruncationPolicy

REF_BATH = BathSpec(alpha=0.126, omega_c=3.04, temperature=1.0)
REF_DT = 0.01
REF_STEPS = 500
REF_MEMORY = 250
REF_CUTOFF = 10**-6.5


def build_pt(bath, dt, n_steps, memory_steps, cutoff, **kw):
    eta = eta_coefficients(bath, dt, memory_steps)
    inf = build_influence_tensors(eta, CouplingSpec.quantum_dot())
    return build_process_tensor(inf, n_steps, TruncationPolicy(cutoff), **kw)


@pytest.fixture(scope="session")
def pt_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("pt")


@pytest.fixture(scope="session")
def reference_pt_path(pt_dir):
    """Process tensor at the reference settings: 10 fs steps, 5 ps horizon,
    2.5 ps memory, cutoff 10^-6.5."""
    path = pt_dir / "reference.ptmps"
    pt = build_pt(REF_BATH, REF_DT, REF_STEPS, REF_MEMORY, REF_CUTOFF)
    ptmod.save(pt, path)
    return path


@pytest.fixture(scope="session")
def reference_pt(reference_pt_path):
    return ptmod.load(reference_pt_path)


@pytest.fixture(scope="session")
def free_pt_path(pt_dir):
    """Coupling-free process tensor on the same 5 ps grid."""
    path = pt_dir / "free.ptmps"
    pt = build_pt(BathSpec(alpha=0.0), REF_DT, REF_STEPS, REF_MEMORY, REF_CUTOFF)
    ptmod.save(pt, path)
    return path


@pytest.fixture(scope="session")
def free_pt(free_pt_path):
    return ptmod.load(free_pt_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
