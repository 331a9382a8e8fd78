"""Training workflow, benchmarks and failure-injection drivers."""
