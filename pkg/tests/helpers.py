import numpy as np

from app.services.autodiff import Tensor


def numeric_gradient(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar fn() with respect to every entry of array (modified in place)"""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + h
        plus = float(fn())
        array[index] = original - h
        minus = float(fn())
        array[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(build, inputs, tol: float = 1e-4) -> float:
    """
    build(*tensors) -> scalar Tensor. Returns the worst relative error over every input
    after comparing the backward pass against central differences.
    """
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    build(*tensors).backward()
    worst = 0.0
    for tensor in tensors:
        numeric = numeric_gradient(lambda: build(*tensors).data, tensor.data)
        worst = max(worst, relative_error(tensor.grad, numeric))
    assert worst < tol, f"relative gradient error {worst:.2e}"
    return worst
