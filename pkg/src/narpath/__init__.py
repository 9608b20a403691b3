"""Multi-agent path finding with an LLM planner fused to a GNN reasoner that imitates CBS."""

__version__ = "0.1.0"
