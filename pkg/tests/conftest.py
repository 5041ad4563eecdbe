import pytest

from thermfem import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # pay any jit compilation once, before timed tests run
    kernels.warmup()
