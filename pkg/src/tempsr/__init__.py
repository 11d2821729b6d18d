"""tempsr: multitemporal image super-resolution with permutation-invariant fusion.

Submodules:
    autodiff        reverse-mode differentiable tensors
    temporal_ops    permutation-equivariant primitives on [B,T,F,H,W] stacks
    blocks          feature-attention and adaptive-filter composite blocks
    model           full network assembly, parameter archives
    losses          Laplacian NLL and shift/brightness-insensitive variants
    metrics         cPSNR / cSSIM evaluation
    data            dataset io, preprocessing, synthetic scene generator
    baseline        bicubic upsample + registration + temporal averaging
    training        Adam optimizer, training loop, checkpoints
    sparsification  uncertainty-vs-error diagnostics
    cli             command-line entry points
"""

__version__ = "0.1.0"
