import numpy as np
import pytest


def naive_conv2d(x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
    """Direct-summation cross-correlation, loop over every output element."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += (
                                    w[oc, ci, a, bb]
                                    * xp[bi, g * cg + ci, i * stride + a * dilation, j * stride + bb * dilation]
                                )
                    out[bi, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out


def naive_transposed_conv2d(x, w, stride=1, padding=0, output_padding=0):
    """Scatter form: every input pixel adds a weighted kernel copy."""
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    full_h = stride * (h - 1) + kh + output_padding
    full_w = stride * (wd - 1) + kw + output_padding
    full = np.zeros((n, co, full_h + padding, full_w + padding))
    for bi in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    full[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[bi, c, i, j] * w[c]
    ho = stride * (h - 1) + kh - 2 * padding + output_padding
    wo = stride * (wd - 1) + kw - 2 * padding + output_padding
    return full[:, :, padding : padding + ho, padding : padding + wo]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
