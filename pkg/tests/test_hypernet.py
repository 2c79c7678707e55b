import itertools

import numpy as np
import pytest

from stsun import tensor as T
from stsun.checks import perturb
from stsun.gradcheck import grad_check
from stsun.hypernet import GeneratedLinear, HyperBranch, apply, generate
from stsun.metadata import ValidationError
from stsun.tensor import ParameterStore, Tensor


def branch(use_cls, use_positional, n_out=5, dim=4, seed=0):
    store = ParameterStore(seed)
    b = HyperBranch(store, "h", dim, n_out, use_cls=use_cls, use_positional=use_positional, depth=2, heads=2)
    perturb(store)
    return b


def test_input_side_map_has_bias():
    gl = generate(branch(True, True, n_out=4), Tensor(np.random.default_rng(0).standard_normal((3, 4))))
    assert gl.weight.shape == (3, 4)
    assert gl.bias.shape == (4,)


def test_output_side_map_is_weight_only():
    gl = generate(branch(False, True, n_out=2), Tensor(np.random.default_rng(0).standard_normal((3, 4))))
    assert gl.weight.shape == (3, 2)
    assert gl.bias is None


def test_generate_is_pure():
    b = branch(True, True)
    tok = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    g1, g2 = generate(b, tok), generate(b, tok)
    assert g1.weight.data.tobytes() == g2.weight.data.tobytes()
    assert g1.bias.data.tobytes() == g2.bias.data.tobytes()


def test_zero_tokens_or_wrong_width_rejected():
    b = branch(True, False)
    with pytest.raises(ValidationError):
        b.generate(Tensor(np.ones((3, 5))))
    with pytest.raises(ValueError):
        b.generate(Tensor(np.ones((0, 4))))


def test_apply_hand_example():
    gl = GeneratedLinear(Tensor([[1.0], [1.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(apply(gl, Tensor([[1.0, 2.0]])).data, [[4.0]])


def test_apply_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(apply(GeneratedLinear(Tensor(np.eye(4)), Tensor(np.zeros(4))), Tensor(x)).data, x)
    with pytest.raises(ValidationError):
        apply(GeneratedLinear(Tensor(np.eye(3))), Tensor(x))


@pytest.mark.parametrize("use_cls", [True, False])
def test_row_permutation_equivariance(use_cls):
    b = branch(use_cls, False)
    tok = np.random.default_rng(2).standard_normal((5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    g = b.generate(Tensor(tok))
    gp = b.generate(Tensor(tok[perm]))
    np.testing.assert_allclose(gp.weight.data, g.weight.data[perm], atol=1e-12)
    if use_cls:
        np.testing.assert_allclose(gp.bias.data, g.bias.data, atol=1e-12)


@pytest.mark.parametrize("use_cls,use_positional", list(itertools.product([True, False], repeat=2)))
def test_generate_apply_gradients(use_cls, use_positional):
    b = branch(use_cls, use_positional, n_out=3)
    x = np.random.default_rng(3).standard_normal((2, 4))
    w = np.random.default_rng(4).standard_normal((2, 3))
    err = grad_check(lambda tok: T.sum_(apply(b.generate(tok), Tensor(x)) * w),
                     Tensor(np.random.default_rng(5).standard_normal((4, 4))))
    assert err < 1e-4


def test_initial_scale_near_isometric():
    # fresh (unperturbed) weights: generated entries are O(1/sqrt(fan_in))
    store = ParameterStore(0)
    b = HyperBranch(store, "h", 32, 32, use_cls=True, use_positional=True)
    gl = b.generate(Tensor(np.random.default_rng(0).standard_normal((3, 32))))
    assert 0.1 < np.std(gl.weight.data) * np.sqrt(3) < 10
