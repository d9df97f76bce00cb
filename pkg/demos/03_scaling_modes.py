#!/usr/bin/env python3
"""
The same model trained three ways: full batch, minibatch-stochastic and split
across in-process workers.

Distributed training is an exact reorganisation of batch training, so its
posterior matches to rounding error. Stochastic training sees one minibatch
per step and only agrees in accuracy.
"""

import time

import numpy as np

from sepgp import TrainConfig, distributed_train, make_blobs, train_batch, train_stochastic

train_set, test_set = make_blobs(3000, seed=0), make_blobs(2000, seed=1)

# %% batch reference
t = time.perf_counter()
batch, _ = train_batch(train_set, TrainConfig(m=40, iterations=40, seed=0))
print(f"batch        error {batch.evaluate(test_set).error_rate:.4f}  "
      f"{time.perf_counter() - t:5.1f}s")

# %% the sweep and gradient sums spread over 4 workers
t = time.perf_counter()
dist, _ = distributed_train(train_set, TrainConfig(mode="distributed", workers=4, m=40,
                                                   iterations=40, seed=0))
gap = np.abs(dist.posterior.mu - batch.posterior.mu).max()
print(f"distributed  error {dist.evaluate(test_set).error_rate:.4f}  "
      f"{time.perf_counter() - t:5.1f}s  max |mu - mu_batch| = {gap:.1e}")

# %% two epochs of minibatches as large as the inducing set, with ADADELTA steps
t = time.perf_counter()
sto, curve = train_stochastic(train_set, TrainConfig(mode="stochastic", m=40, batch_size=40,
                                                     iterations=2, seed=0))
print(f"stochastic   error {sto.evaluate(test_set).error_rate:.4f}  "
      f"{time.perf_counter() - t:5.1f}s  ({len(curve)} minibatch steps)")
