#!/usr/bin/env python3
# coding: utf-8

# # Attention with an explicit adjacency
#
# The vertices of a feature grid attend to each other. Besides the usual
# query-key similarity, an attention head can take an (N, N) adjacency
# estimate; its row softmax is added to the similarity softmax before the
# values are mixed.

# In[1]:

import numpy as np

from urm import autodiff as ad
from urm import edges, nn
from urm.autodiff import Tensor

rng = np.random.default_rng(7)
N, C = 6, 8
x = Tensor(rng.normal(size=(N, C)))
block = nn.SABlockParams.init(rng, C, n_heads=2)
head = block.mhsa.heads[0]


# ## Attention weights
#
# Without an adjacency every row is a probability distribution. With one, each
# row sums to 2.

# In[2]:

scale = 1 / np.sqrt(C)
implicit = nn.attention_weights(head, x, scale).data
adj = Tensor(rng.normal(size=(N, N)))
fused = nn.attention_weights(head, x, scale, soft_adj=ad.softmax(adj, axis=-1)).data
print("implicit row sums", implicit.sum(axis=1).round(6))
print("fused row sums   ", fused.sum(axis=1).round(6))


# The full block is permutation equivariant: shuffle the vertices and the
# adjacency together and the output is shuffled the same way.

# In[3]:

perm = rng.permutation(N)
out = nn.sablock(block, x, adj).data
out_perm = nn.sablock(block, Tensor(x.data[perm]), Tensor(adj.data[perm][:, perm])).data
print("equivariance gap", np.abs(out_perm - out[perm]).max())


# ## Template bank
#
# A bank of S learned (N, N) templates is mixed by a softmax selector driven
# by the mean vertex embedding. The result always stays inside the
# elementwise range spanned by the templates.

# In[4]:

bank = edges.BankParams.init(rng, N, C, bank_size=4)
bank.templates.data = rng.normal(size=bank.templates.shape).astype(np.float32)
weights = edges.tb_selector(bank, x).data
print("selector weights", weights.round(3), "sum", weights.sum().round(6))
A = edges.tb_adjacency(bank, x).data
lo, hi = bank.templates.data.min(0), bank.templates.data.max(0)
print("inside template bounds:", bool(np.all((A >= lo - 1e-6) & (A <= hi + 1e-6))))


# ## Class-token projection
#
# Verb and noun tokens are each projected to one weight per vertex and layer
# normalized; their outer product is the adjacency, so it has rank one.

# In[5]:

ctp = edges.CTPParams.init(rng, N, C, "vn")
tokens = edges.initial_tokens(ctp)
A = edges.ctp_adjacency(ctp, tokens).data
print("singular values", np.linalg.svd(A, compute_uv=False).round(4))
