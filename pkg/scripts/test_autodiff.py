import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from nlf import autodiff as ad  # noqa: E402
from nlf.autodiff import Adam, Tensor, gradcheck  # noqa: E402
from nlf.errors import AutodiffError, ShapeError  # noqa: E402
from nlf.nn import MLP  # noqa: E402

TOL = 1e-4


def test_elementwise_basics():
    assert np.allclose(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    v = np.array([0.3, -1.2, 2.5])
    assert np.allclose(ad.matmul(np.eye(3), v).data, v)
    assert ad.sigmoid(0.0).item() == 0.5


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ad.Tape():
        ad.backward((x * x).sum())
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_root_is_noop():
    c = Tensor(3.0)
    ad.backward(c)
    assert c.grad is None


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape():
        y = x * 2.0
        try:
            ad.backward(y)
        except AutodiffError:
            pass
        else:
            raise AssertionError("non-scalar root accepted")
        s = y.sum()
        ad.backward(s)
        try:
            ad.backward(s)
        except AutodiffError:
            pass
        else:
            raise AssertionError("second backward on a consumed tape accepted")


def test_mlp_gradcheck():
    rng = np.random.default_rng(0)
    mlp = MLP([3, 6, 6, 1], rng, activation="softplus")
    x = rng.normal(size=(5, 3))
    err = gradcheck(lambda: mlp(Tensor(x)).sum(), mlp.parameters())
    assert err < TOL, err


def _check(fn, *arrays):
    params = [Tensor(a, requires_grad=True) for a in arrays]
    err = gradcheck(lambda: fn(*params), params)
    assert err < TOL, (fn, err)


def test_op_gradients():
    rng = np.random.default_rng(1)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    any_ = lambda *s: rng.normal(size=s)  # noqa: E731
    w = any_(4)
    m = any_(4, 3)
    for _ in range(5):
        _check(lambda a, b: (a * b + a / b - b).sum(), any_(3, 4), pos(3, 4))
        _check(lambda a: (ad.exp(a) + ad.log(a) + ad.sqrt(a)).sum(), pos(6))
        _check(lambda a: (ad.sin(a) * ad.cos(a) + ad.tanh(a)).sum(), any_(6))
        _check(lambda a: (ad.sigmoid(a) * w + ad.softplus(a)).sum(), any_(4))
        _check(lambda a: (a**3).sum(), pos(5))
        _check(lambda a: (ad.cumsum(a, axis=1) * ad.cumsum(a, axis=1)).sum(), any_(3, 5))
        _check(lambda a, b: ((a @ b) ** 2).sum(), any_(3, 4), any_(4, 2))
        _check(lambda a, b: ((a @ b) ** 2).sum(), any_(2, 3, 4), any_(2, 4, 1))
        _check(lambda a: (ad.take(a, np.array([0, 2, 2, 1])) ** 2).sum(), any_(3, 2))
        _check(lambda a: (a[1:, ::2] ** 2).sum() + (a[np.array([0, 0]), 1] ** 2).sum(), any_(3, 4))
        _check(lambda a, b: (ad.concat([a, b], axis=1) ** 2).mean(), any_(2, 3), any_(2, 1))
        _check(lambda a, b: (ad.stack([a, b], axis=0) ** 2).sum(axis=0).mean(), any_(4), any_(4))
        _check(lambda a: (ad.broadcast_to(a.reshape(1, 3), (4, 3)) * m).sum(), any_(3))
        _check(lambda a: ad.where(np.array([True, False, True]), a * a, -a).sum(), any_(3))
        _check(lambda a: (ad.scatter(a, np.array([5, 0, 3]), (2, 3)) ** 2).sum(), any_(3))


def test_conv2d_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    wt = Tensor(rng.normal(size=(3, 2, 4, 4)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    err = gradcheck(lambda: (ad.conv2d(x, wt, b) ** 2).sum(), [x, wt, b])
    assert err < TOL, err


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def grad(fn):
        x.grad = None
        with ad.Tape():
            ad.backward(fn())
        return x.grad.copy()

    l1 = lambda: (ad.sin(x) * x).sum()  # noqa: E731
    l2 = lambda: (x * x * x).sum()  # noqa: E731
    combined = grad(lambda: l1() * 2.0 + l2() * -0.5)
    assert np.allclose(combined, 2.0 * grad(l1) - 0.5 * grad(l2), atol=1e-12)


def test_shape_errors():
    try:
        ad.add(np.zeros(3), np.zeros(4))
    except ShapeError:
        pass
    else:
        raise AssertionError("mismatched add accepted")
    try:
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    except ShapeError:
        pass
    else:
        raise AssertionError("mismatched matmul accepted")


def test_adam_zero_grad_leaves_param():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.zeros(1)
    Adam([p], lr=0.1).step()
    assert p.data[0] == 1.0
    assert p.grad is None


def test_adam_first_step_is_lr():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.ones(1)
    Adam([p], lr=0.01).step()
    assert abs(p.data[0] - 0.99) < 1e-6


def test_adam_descends_on_constant_grad():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(50):
        p.grad = np.array([-2.0])
        opt.step()
    assert p.data[0] > 1.0


def _run() -> None:
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")


if __name__ == "__main__":
    _run()
