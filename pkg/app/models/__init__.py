"""
Domain records: scenes, batches, training logs, configurations.
"""
