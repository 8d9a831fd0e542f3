"""Brain-tumour MRI classification pipelines built on plain numpy."""
