"""Fine-grained kernel group sparsity for mobile CNNs: pruning, rearrangement, IR and engine."""
__version__ = "0.1.0"
