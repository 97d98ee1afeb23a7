"""Reference training, stream evaluation, experiments and reports."""
