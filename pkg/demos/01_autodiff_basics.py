"""A tour of the tensor engine: build a graph, run backward, and check the
results against finite differences and the convolution adjoint identity."""

import numpy as np

from trimodal.autograd import Tensor, conv3d, conv_transpose3d, no_grad, softmax
from trimodal.gradcheck import check_grad


def main():
    rng = np.random.default_rng(7)

    # a small composite graph, differentiated in one backward pass
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    loss = (softmax(x @ w, axis=-1).square().sum() + x.abs().mean())
    loss.backward()
    print(f"loss value        {float(loss.data):.6f}")
    print(f"x.grad norm       {np.linalg.norm(x.grad):.6f}")
    print(f"w.grad norm       {np.linalg.norm(w.grad):.6f}")

    # the same gradient, recovered numerically
    err, _, _ = check_grad(
        lambda t: softmax(t @ w.detach(), axis=-1).square().sum() + t.abs().mean(),
        x.data)
    print(f"finite-diff rel err  {err:.2e}")

    # conv and conv-transpose share kernels: <conv(x,K), y> == <x, convT(y,K)>
    xv = Tensor(rng.standard_normal((1, 2, 6, 6, 6)))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    y = rng.standard_normal((1, 3, 6, 6, 6))
    fwd = float((conv3d(xv, Tensor(k), stride=1, padding=1).data * y).sum())
    adj = float((xv.data * conv_transpose3d(Tensor(y), Tensor(k), stride=1, padding=1).data).sum())
    print(f"adjoint identity   {fwd:.6f} == {adj:.6f}  (diff {abs(fwd - adj):.2e})")

    # no_grad turns graph building off entirely
    with no_grad():
        silent = (x * 3.0).sum()
    print(f"built under no_grad: requires_grad={silent.requires_grad}")


if __name__ == "__main__":
    main()
