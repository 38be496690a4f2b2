"""Binary and text codecs for datasets, checkpoints, frame dumps and reports."""
