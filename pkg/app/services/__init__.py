"""
Model components, training, checkpoints, scene generation and the experiment harness.
"""
