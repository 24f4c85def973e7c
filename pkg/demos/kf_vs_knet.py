"""Unsupervised KalmanNet against the Kalman filter on a 2x2 linear model.

The network is trained from observations only. The Kalman filter knows Q and R
and is the MMSE estimator here, so it is the target to match. After training
the learned gain settles close to the steady-state Kalman gain.

    python3 demos/kf_vs_knet.py
"""
import numpy as np

from kalmannet import canonical_linear_model, generate_dataset, kf_filter_batch, knet_filter, mse_db
from kalmannet.filters import riccati_steady_state
from kalmannet.training import TrainingConfig, evaluate, train_offline

R2 = 0.1        # 1/r^2 = 10 dB, q^2 = r^2

model = canonical_linear_model(2, q2=R2, r2=R2)
print("F =", model.F.tolist(), " H =", model.H.tolist())

# no state labels in the training set; the validation set is labeled only for reporting
train = generate_dataset(model, 400, 80, labeled=False, seed=1)
val = generate_dataset(model, 50, 80, seed=2)
test = generate_dataset(model, 100, 80, seed=3)

# weight decay and clipping scale with r^2
cfg = TrainingConfig(mode="unsupervised", epochs=30, gamma=1e-4 * R2, clip_norm=R2)
params, curve = train_offline(train, model.knowledge(), cfg, validation=val)

print("\nepoch  innovation loss  val mse [dB]")
for e, loss, db in zip(curve.epochs, curve.train_loss, curve.val_mse_db):
    if e % 5 == 0:      # epoch 0 is the untrained network and has no training loss
        print(f"{e:5d}  {loss:15.4f}  {db:12.3f}" if e else f"{e:5d}  {'-':>15}  {db:12.3f}")
print(f"best epoch {curve.best_epoch}")

est, _ = evaluate(params, model.knowledge(), test)
kf, _ = kf_filter_batch(model, test.observations(), test.initial_states())
knet_db, kf_db = mse_db(est, test.states()), mse_db(kf, test.states())
print(f"\ntest mse: knet {knet_db:.3f} dB, kf {kf_db:.3f} dB, gap {knet_db - kf_db:+.3f} dB")

# the gain the network produces late in a trajectory vs the steady-state Kalman gain
_, recs = knet_filter(params, model.knowledge(), test[0])
late = np.mean([r.gain for r in recs[-20:]], axis=0)
_, _, K, _ = riccati_steady_state(model)
np.set_printoptions(precision=3, suppress=True)
print("\nmean learned gain over the last 20 steps:\n", late)
print("steady-state Kalman gain:\n", K)
