"""Model configuration."""

from dataclasses import asdict, dataclass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    codebook_size: int = 256  # K, shared by both SID levels
    l_max: int = 48
    vocab_size: int = 0  # item rows + 1 pad row; set when the feature bank is known
    static_dim: int = 4
    time_dim: int = 0
    hot_dim: int = 1
    use_moe: bool = False
    n_experts: int = 8
    moe_top_k: int = 2
    expert_hidden: int = 0  # 0 means 4 * hidden_dim
    temperature: float = 0.02
    lambda1: float = 1.0
    lambda2: float = 1.0
    balance_weight: float = 0.0  # auxiliary MoE load-balance loss; monitoring-only when 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.moe_top_k > self.n_experts:
            raise ValueError("moe_top_k must be <= n_experts")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.expert_hidden == 0:
            self.expert_hidden = 4 * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def feature_dim(self) -> int:
        """ItemDNN input width: static + time + hot features + id embedding."""
        return self.static_dim + self.time_dim + self.hot_dim + self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
