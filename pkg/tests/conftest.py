import numpy as np
import pytest

from nonexp_hjb.valuenet import DerivativeBundle, ValueNet


class AffineField:
    """Duck-typed network with ``V = a + b t + c . x`` (per output) and exact derivatives.

    ``a`` and ``b`` have shape ``(p,)`` and ``c`` shape ``(n, p)``.
    """

    def __init__(self, a, b, c):
        self.a = np.atleast_1d(np.asarray(a, float))
        self.b = np.atleast_1d(np.asarray(b, float))
        self.c = np.atleast_2d(np.asarray(c, float))
        self.state_dim = self.c.shape[0]
        self.out_dim = len(self.a)

    def eval_with_derivatives(self, x, t, pairs=None, keep_cache=False):
        x = np.atleast_2d(np.asarray(x, float))
        n = len(x)
        t = np.broadcast_to(np.asarray(t, float), (n,))
        value = self.a + self.b * t[:, None] + x @ self.c
        return DerivativeBundle(value=value, grad_x=np.broadcast_to(self.c, (n,) + self.c.shape).copy(),
                                dV_dt=np.broadcast_to(self.b, (n, self.out_dim)).copy(),
                                hess_xx=np.zeros((n, self.state_dim, self.state_dim, self.out_dim)),
                                cache=None, chain=None)

    def value(self, x, t):
        v = self.eval_with_derivatives(x, t).value
        return v[:, 0] if self.out_dim == 1 else v


def constant_value_net(state_dim, c=0.0, width=4, out_dim=1):
    """Real network whose output is exactly ``c`` (zero weights, output bias ``c``)."""
    n = ValueNet(state_dim, width, out_dim).params.size
    net = ValueNet(state_dim, width, out_dim, params=np.zeros(n))
    p = net.params.copy()
    p[-out_dim:] = c
    net.params = p
    return net


@pytest.fixture
def affine_field():
    return AffineField


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(tag: str, ok: bool, detail: str) -> None:
    """Remember one acceptance outcome for the end-of-run summary."""
    _ACCEPTANCE_LINES.append(f"{tag}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
