"""Federated low-rank adapter fine-tuning of a tiny byte-level language model."""

from .adapters import AdapterPair, AdapterSet, from_bytes, init_adapters, load, merge, save, to_bytes
from .client import ClientState, TrainHyper, client_update, cl_penalty, combined_objective, estimate_jacobian, local_loss
from .corpus import InstructionExample, generate_clients, load_jsonl, save_jsonl
from .errors import FedLoraError
from .experiment import ExperimentConfig, emit_report, run_experiment
from .metrics import MetricReport, bleu_k, bleu_n_avg, perplexity, rouge_l_f1, rouge_n_f1
from .model import BaseModel, ModelConfig, forward_logits, init_base_model, tokenize, detokenize
from .server import FedConfig, aggregate, run_round, run_training

__version__ = "0.1.0"

__all__ = [
    "AdapterPair", "AdapterSet", "BaseModel", "ClientState", "ExperimentConfig", "FedConfig",
    "FedLoraError", "InstructionExample", "MetricReport", "ModelConfig", "TrainHyper",
    "aggregate", "bleu_k", "bleu_n_avg", "cl_penalty", "client_update", "combined_objective",
    "detokenize", "emit_report", "estimate_jacobian", "forward_logits", "from_bytes",
    "generate_clients", "init_adapters", "init_base_model", "load", "load_jsonl", "local_loss",
    "merge", "perplexity", "rouge_l_f1", "rouge_n_f1", "run_experiment", "run_round",
    "run_training", "save", "save_jsonl", "to_bytes", "tokenize",
]
