"""Adapting a pretrained KalmanNet to a noisier stream, without labels.

The network is pretrained (supervised) at r^2 = 10 dB. It is then deployed on
a single long stream whose observation noise is r^2 = 25 dB. Every 10 samples
it takes one Adam step on the innovation loss of that window. The frozen
network and a Kalman filter that knows the true R are shown for reference.

    python3 demos/online_adaptation.py
"""
import numpy as np

from kalmannet import canonical_linear_model, generate_dataset, kf_filter_batch, knet_filter_batch, mse_db
from kalmannet.knet import stack_values
from kalmannet.ssm import db_to_linear
from kalmannet.training import OnlineConfig, TrainingConfig, train_offline, train_online

q2 = db_to_linear(10.0)
pre_model = canonical_linear_model(2, q2=q2, r2=db_to_linear(10.0))
stream_model = canonical_linear_model(2, q2=q2, r2=db_to_linear(25.0))
knowledge = pre_model.knowledge()         # F and H only, shared by both

# supervised pretraining on the wrong noise level
pre = generate_dataset(pre_model, 500, 80, seed=1)
train, val, _ = pre.split([0.9, 0.1, 0.0])
params, _ = train_offline(train, knowledge, TrainingConfig(mode="supervised", epochs=20, batch_size=50,
                                                           gamma=1e-4 * 10, clip_norm=10.0), validation=val)

stream = generate_dataset(stream_model, 1, 4000, seed=2)[0]
truth = stream.states

online = train_online(stream.observations, stream.x0, params, knowledge, OnlineConfig(window=10), states=truth)
frozen = stack_values(knet_filter_batch(params, knowledge, stream.observations[None], stream.x0[None])[0])[0]
kf = kf_filter_batch(stream_model, stream.observations[None], stream.x0[None])[0][0]

print(f"{online.n_updates} online updates, {len(online.skipped)} skipped")
print("\nquarter  adaptive [dB]  frozen [dB]  kf true R [dB]")
L = len(truth) // 4
for q in range(4):
    sl = slice(q * L, (q + 1) * L)
    print(f"{q + 1:7d}  {mse_db(online.estimates[sl], truth[sl]):13.3f}  {mse_db(frozen[sl], truth[sl]):11.3f}"
          f"  {mse_db(kf[sl], truth[sl]):14.3f}")
