"""Graph tokenization and sequence-transformer node classification.

The package is organized bottom-up: `tensor` provides dense arrays with
reverse-mode differentiation, `graphs` the sparse graph container, `gnn`
the message-passing encoder, `selfsup` the self-supervised losses, `rvq`
residual vector quantization, `serialize` PPR-based sequence building,
`transformer` the downstream classifier, and `pipeline` the end-to-end
stages. `service` exposes the stages over HTTP and `cli` is a thin client.
"""

__version__ = "0.1.0"
