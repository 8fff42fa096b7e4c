import torch

# Single-threaded kernels keep training runs bitwise reproducible and are
# actually faster for the small matrices used here.
torch.set_num_threads(1)
