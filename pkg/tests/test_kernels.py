import os
import subprocess
import sys

import numpy as np

from heaprecall.kernels import jit, pure
from heaprecall.likelihood import MarginalLikelihood
from heaprecall.model import ModelSpec, coarsen
from heaprecall.seeding import int_seeds, stream
from heaprecall.simulation import SimulationDesign, generate_dataset

SCRIPT = """
import numpy as np
from heaprecall.kernels import backend
from heaprecall.likelihood import MarginalLikelihood
from heaprecall.model import ModelSpec
from heaprecall.simulation import SimulationDesign, scenario_case1, generate_dataset
theta, _ = scenario_case1()
data = generate_dataset(theta, SimulationDesign(n_subjects=15, days_per_subject=4), 0)
print(backend(), repr(MarginalLikelihood(data.subjects, ModelSpec())(theta)))
"""


def _run(flag):
    env = dict(os.environ)
    env.pop("HEAPRECALL_DISABLE_NUMBA", None)
    if flag:
        env["HEAPRECALL_DISABLE_NUMBA"] = flag
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    return out[0], float(out[1])


def test_env_flag_selects_numpy_backend_with_same_answer():
    name_jit, ll_jit = _run("")
    name_np, ll_np = _run("1")
    assert (name_jit, name_np) == ("numba", "numpy")
    assert abs(ll_jit - ll_np) < 1e-8 * abs(ll_jit)
    assert _run("0")[0] == "numba"


def _impute_args(theta, data, lik):
    d = lik.data
    _, eta = d.offsets(theta)
    nan = np.full(d.n_subjects, np.nan)
    return (np.ascontiguousarray(d.recall_base(theta)), theta.beta1, np.log(d.x), eta, d.y,
            d.starts, theta.gamma1, theta.gamma2, theta.gamma3, theta.gamma0, theta.sigma_b,
            theta.sigma_u, int_seeds(stream(0, "t"), d.n_subjects), 1_000_000, nan, nan,
            np.zeros(0))


def test_both_impute_kernels_respect_the_reports(case1):
    theta = case1[0]
    data = generate_dataset(theta, SimulationDesign(n_subjects=25), 2)
    lik = MarginalLikelihood(data.subjects, ModelSpec())
    args = _impute_args(theta, data, lik)
    for kernel in (jit.impute, pure.impute):
        out = kernel(*args)
        w, g, status = out[0], out[1], out[-1]
        starts = lik.data.starts
        for i in np.nonzero(status == 0)[0]:
            for t in range(starts[i], starts[i + 1]):
                assert coarsen(int(w[t]), int(g[t])) == int(lik.data.y[t])
        assert (status == 0).mean() > 0.5
