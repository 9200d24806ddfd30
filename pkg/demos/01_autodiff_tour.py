#!/usr/bin/env python3
# coding: utf-8

# # A small reverse-mode autodiff engine
#
# Everything in `urm` runs on a numpy-backed `Tensor` that records the ops
# applied to it. Calling `backward` on a scalar replays that record in reverse
# and leaves gradients on every leaf created with `requires_grad=True`.

# In[1]:

import numpy as np

from urm import autodiff as ad
from urm.autodiff import Tensor, backward, grad_check

rng = np.random.default_rng(0)


# ## Gradients of a tiny expression
#
# d/dx sum(tanh(x)) is 1 - tanh(x)^2, which is exactly 1 at the origin.

# In[2]:

x = Tensor(np.zeros(4), requires_grad=True, precision="double")
backward(ad.reduce_sum(ad.tanh(x)))
print(x.grad)


# Gradients accumulate across calls until you reset them, so a second
# backward pass doubles the stored values.

# In[3]:

backward(ad.reduce_sum(ad.tanh(x)))
print(x.grad)
x.zero_grad()


# ## Broadcasting
#
# Ops accept leading batch dimensions. A bias of shape (C,) added to a
# (B, N, C) tensor receives the gradient summed over the broadcast axes.

# In[4]:

h = Tensor(rng.normal(size=(2, 3, 4)))
b = Tensor(np.zeros(4), requires_grad=True, precision="double")
backward(ad.reduce_sum(ad.add(h, b)))
print(b.grad)  # 2 * 3 = 6 contributions per channel


# ## Checking gradients numerically
#
# `grad_check` compares the tape against central differences and reports the
# worst relative error over every element of every leaf. It insists on
# double precision, since single precision finite differences are mostly noise.

# In[5]:

W = Tensor(rng.normal(size=(5, 5)), requires_grad=True, precision="double")
gamma = Tensor(np.ones(5), requires_grad=True, precision="double")
beta = Tensor(np.zeros(5), requires_grad=True, precision="double")
inp = Tensor(rng.normal(size=(3, 5)))


def loss():
    z = ad.layer_norm(ad.matmul(inp, W), gamma, beta)
    return ad.reduce_sum(ad.mul(ad.softmax(z, axis=-1), ad.gelu(z)))


print(f"max relative error {grad_check(loss, {'W': W, 'gamma': gamma, 'beta': beta}):.2e}")


# A single precision leaf is refused outright.

# In[6]:

try:
    grad_check(loss, {"W": Tensor(W.data, requires_grad=True, precision="single")})
except ad.ContractError as exc:
    print("refused:", exc)
