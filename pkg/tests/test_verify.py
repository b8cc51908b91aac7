import numpy as np
import pytest

from ctxseg import cli, verify
from ctxseg.verify import Check, EXPECTED_PARAMS, conv2d_oracle, matmul_oracle, maxpool_oracle


def test_params_suite_all_pass():
    checks = verify.params_suite()
    assert all(c.passed for c in checks), [c.line() for c in checks if not c.passed]
    assert sum(c.name.startswith("params ") and "==" in c.name for c in checks) == len(EXPECTED_PARAMS)


def test_oracle_suite_small():
    checks = verify.oracle_suite(cases=5, seed=3)
    assert [c.passed for c in checks] == [True] * 4


def test_op_gradients_pass():
    checks = verify.grad_suite(archs=())
    assert len(checks) == len(verify.op_gradient_cases())
    assert all(c.passed for c in checks), [c.line() for c in checks if not c.passed]


def test_conv_oracle_by_hand():
    # 1x1 input keeps only the kernel tap that lands on the pixel after padding
    x = np.full((1, 1, 1, 1), 2.0)
    w = np.arange(16.0).reshape(1, 1, 4, 4)
    assert conv2d_oracle(x, w)[0, 0, 0, 0] == 2.0 * w[0, 0, verify.PAD_BEFORE, verify.PAD_BEFORE]


def test_small_oracles_by_hand():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    assert maxpool_oracle(x)[0, 0, 0, 0] == 5.0
    assert np.array_equal(matmul_oracle(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]])), [[1, 2], [3, 4]])


def test_check_line_format():
    ok = Check("thing", True, 1e-7, 1e-4, 0.25)
    bad = Check("thing", False, float("nan"), 1e-4)
    assert ok.line().startswith("[PASS] thing")
    assert bad.line().startswith("[FAIL]")


def test_timed_rejects_non_finite():
    assert not verify._timed("x", 1.0, lambda: float("nan")).passed
    assert verify._timed("x", 1.0, lambda: 0.5).passed
    assert not verify._timed("x", 1.0, lambda: 0.5, below=False).passed


def test_cli_exit_code_reflects_failures(monkeypatch, capsys):
    monkeypatch.setitem(verify.SUITES, "params", lambda: [Check("a", True, 0, 1), Check("b", False, 2, 1)])
    assert cli.main(["verify", "--suite", "params"]) == cli.EXIT_RUNTIME
    out = capsys.readouterr().out
    assert "1/2 checks passed" in out


@pytest.mark.slow
def test_arch_gradient_reduced_width():
    assert verify.arch_gradient_check("G", width=0.0625, coords=1) < verify.GRAD_TOL
