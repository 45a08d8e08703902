import numpy as np
import pytest

from mheglm import ckks as C

# lines collected by test_acceptance, printed at the end of every run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def small_params():
    return C.CryptoParams.build(log_n=11, levels=4)


@pytest.fixture(scope="session")
def small_keys(small_params):
    rng = np.random.default_rng(7)
    sk, pk = C.keygen(small_params, rng)
    rlk = C.gen_relin_key(small_params, sk, rng)
    rtk = C.gen_rotation_keys(small_params, sk, rng)
    return sk, pk, rlk, rtk


@pytest.fixture(scope="session")
def evaluator(small_params, small_keys):
    _, _, rlk, rtk = small_keys
    return C.Evaluator(small_params, rlk, rtk)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
