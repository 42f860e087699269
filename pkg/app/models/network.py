from pydantic import BaseModel, Field, model_validator

from app.models.psg import EPOCH_SECONDS

TAU_GRID = [1, 3, 5, 10, 15, 30]
HIDDEN_UNIT_GRID = [0, 64, 128, 256, 512, 1024, 2048]
ALPHA_GRID = [4, 6, 8, 10, 20]


class ModelConfig(BaseModel):
    """Network hyperparameters; defaults are the full-size configuration"""
    n_channels: int = Field(4, ge=1)
    fs: int = Field(128, ge=1)
    n_classes: int = Field(5, ge=2)
    n_blocks: int = Field(7, ge=1)
    base_filters: int = Field(4, ge=1)
    hidden_units: int = Field(1024, ge=0)
    alpha: int = Field(10, ge=1)
    tau: int = Field(30, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.fs % self.reduction:
            raise ValueError(f"2^R = {self.reduction} must divide fs = {self.fs}")
        if self.n_samples % self.reduction:
            raise ValueError(f"T = {self.n_samples} not divisible by 2^R = {self.reduction}")
        if EPOCH_SECONDS % self.tau:
            raise ValueError(f"tau = {self.tau} s must divide {EPOCH_SECONDS} s")
        return self

    @property
    def reduction(self) -> int:
        return 2 ** self.n_blocks

    @property
    def n_samples(self) -> int:
        """T = alpha * 30 * fs"""
        return self.alpha * EPOCH_SECONDS * self.fs

    @property
    def columns_per_second(self) -> int:
        return self.fs // self.reduction

    @property
    def n_columns(self) -> int:
        return self.n_samples // self.reduction

    @property
    def epoch_columns(self) -> int:
        return EPOCH_SECONDS * self.columns_per_second

    def window_columns(self, tau: int) -> int:
        if EPOCH_SECONDS % tau:
            raise ValueError(f"tau = {tau} s must divide {EPOCH_SECONDS} s")
        return tau * self.columns_per_second

    @property
    def feature_channels(self) -> int:
        """f0 * 2^(R+1) channels leave the last residual block"""
        return self.base_filters * 2 ** (self.n_blocks + 1)

    def block_channels(self, r: int):
        """(input, bottleneck, output) channels of block r, 1-indexed"""
        bottleneck = self.base_filters * 2 ** (r - 1)
        c_in = self.n_channels if r == 1 else 4 * self.base_filters * 2 ** (r - 2)
        return c_in, bottleneck, 4 * bottleneck

    def parameter_count(self) -> int:
        """
        Trainable parameters (conv weights and biases, batch-norm affine pairs,
        GRU matrices and biases, classifier):

            mix      C*C + C + 2C
            block r  c_in*m + m + 2m + 3*m*m + m + 2m + 4*m*m + 4m + 8m + c_in*4m + 4m
            temp     2 * 3*n_h*(F + n_h + 1)   (0 when n_h = 0)
            clf      K*D + K, D = 2*n_h or F
        """
        c = self.n_channels
        total = c * c + c + 2 * c
        for r in range(1, self.n_blocks + 1):
            c_in, m, out = self.block_channels(r)
            total += c_in * m + m + 2 * m
            total += 3 * m * m + m + 2 * m
            total += m * out + out + 2 * out
            total += c_in * out + out
        f = self.feature_channels
        h = self.hidden_units
        if h:
            total += 2 * 3 * h * (f + h + 1)
        d = 2 * h if h else f
        total += self.n_classes * d + self.n_classes
        return total
