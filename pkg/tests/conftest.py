import numpy as np
import pytest

from hcrbound.nn import Affine, Conv2D, Flatten, MaxPool2D, Network, ReLU, Softmax


def random_affine(rng, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return Affine(rng.normal(size=(n_in, n_out)) * scale, rng.normal(size=n_out) * 0.1)


def random_conv(rng, cin, cout, k, stride=1, padding=0):
    w = rng.normal(size=(cout, cin, k, k)) / np.sqrt(cin * k * k)
    return Conv2D(w, rng.normal(size=cout) * 0.1, stride=stride, padding=padding)


def random_mlp(rng, dims, softmax=False):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(random_affine(rng, a, b))
        if i < len(dims) - 2:
            layers.append(ReLU())
    if softmax:
        layers.append(Softmax())
    return Network(layers, (dims[0],))


def random_convnet(rng, kind=None):
    """Small network drawn from a few templates covering every layer kind."""
    kind = kind if kind is not None else rng.integers(4)
    c = int(rng.integers(1, 3))
    if kind == 0:
        layers = [random_conv(rng, c, 3, 3), ReLU(), MaxPool2D(2, 2), Flatten(),
                  random_affine(rng, 3 * 3 * 3, 5), ReLU()]
        shape = (c, 8, 8)
    elif kind == 1:
        layers = [random_conv(rng, c, 2, 3, stride=2, padding=1), ReLU(),
                  MaxPool2D(2, 2, 1, 1), Flatten(), random_affine(rng, 2 * 3 * 3, 4),
                  Softmax()]
        shape = (c, 7, 7)
    elif kind == 2:
        layers = [random_conv(rng, c, 2, 2), MaxPool2D(3, 2), ReLU(), Flatten(),
                  random_affine(rng, 2 * 2 * 2, 6), ReLU(), random_affine(rng, 6, 3)]
        shape = (c, 9, 6)
    else:
        layers = [Flatten(), random_affine(rng, c * 25, 12), ReLU(),
                  random_affine(rng, 12, 7), ReLU(), random_affine(rng, 7, 4), Softmax()]
        shape = (c, 5, 5)
    return Network(layers, shape)


def near_kink(net, theta, tol=1e-3):
    """True when a ReLU input or a pooling window's top-two gap is within tol."""
    x = theta[None]
    for layer in net.layers:
        if isinstance(layer, ReLU) and np.min(np.abs(x)) < tol:
            return True
        if isinstance(layer, MaxPool2D):
            win = np.sort(layer._windows(x), axis=-1)
            if win.shape[-1] > 1 and np.min(win[..., -1] - win[..., -2]) < tol:
                return True
        x, _ = layer.forward(x)
    return False


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
