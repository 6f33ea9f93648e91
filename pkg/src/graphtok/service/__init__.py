"""HTTP facade over the pipeline stages."""
