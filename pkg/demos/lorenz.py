"""Unsupervised KalmanNet on the Lorenz attractor, against the extended Kalman filter.

The state follows the Lorenz ODE, discretized with a 5th-order Taylor
expansion of the matrix exponential (dt = 0.02). Observations are the full
state plus noise, with q^2 = r^2 = 0 dB. The EKF knows Q and R; KalmanNet
sees only the transition function and H, and trains on observations alone.

    python3 demos/lorenz.py
"""
import time

from kalmannet import LorenzModel, ekf_filter_batch, generate_dataset, knet_filter, mse_db
from kalmannet.training import TrainingConfig, evaluate, train_offline

model = LorenzModel(q2=1.0, r2=1.0)
data = generate_dataset(model, 250, 100, seed=0)
train, val, test = data.split([0.8, 0.1, 0.1])
train = train.unlabeled()

cfg = TrainingConfig(epochs=20, batch_size=20, patience=6)
params, curve = train_offline(train, model.knowledge(), cfg, validation=val)
print("val mse per epoch [dB]:", " ".join(f"{v:.2f}" for v in curve.val_mse_db))

est, _ = evaluate(params, model.knowledge(), test)
ekf = ekf_filter_batch(model, test.observations(), test.initial_states())
knet_db, ekf_db = mse_db(est, test.states()), mse_db(ekf, test.states())
print(f"\ntest mse: knet {knet_db:.3f} dB, ekf {ekf_db:.3f} dB, gap {knet_db - ekf_db:+.3f} dB")
print("observation noise floor: 0 dB")

t0 = time.perf_counter()
knet_filter(params, model.knowledge(), test[0])
print(f"knet inference on one trajectory: {1e3 * (time.perf_counter() - t0):.1f} ms")
