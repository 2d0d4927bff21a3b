"""Multi-branch spatio-temporal graph network for predicting deep ice-layer
thickness from shallow layers, with fused GCN-LSTM / SAGE-LSTM baselines."""

__version__ = "0.1.0"

# Reported benchmark (mean +/- std test RMSE, mean train time) from the original
# experiments on the CReSIS 2012 Greenland data. Not reproducible with this
# package: the data is not distributed and timings depend on the original hardware.
REPORTED_TABLE = {
    "gcn-lstm": {"rmse_mean": 3.2106, "rmse_std": 0.1188, "train_time": "1:58:56"},
    "sage-lstm": {"rmse_mean": 3.1949, "rmse_std": 0.0332, "train_time": "1:16:14"},
    "multibranch": {"rmse_mean": 3.1236, "rmse_std": 0.0548, "train_time": "0:16:18"},
}
