from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

TARGET_FS = 128
EEG_BAND: Tuple[float, float] = (0.5, 35.0)
EMG_HIGHPASS = 10.0

# Pita EEG (Hz) untuk fitur band power dan signature stage sintetis
EEG_BANDS = {
    "delta": (0.5, 2.0),
    "theta": (4.0, 7.0),
    "alpha": (8.0, 12.0),
    "spindle": (12.0, 14.0),
}


class FilterSpec(BaseModel):
    """Butterworth filter realized as second-order sections"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["bandpass", "highpass"]
    corners: Tuple[float, ...]
    fs: float = Field(..., gt=0)
    order: int = Field(4, ge=1)
    sos: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        expected = 2 if self.kind == "bandpass" else 1
        if len(self.corners) != expected:
            raise ValueError(f"{self.kind} needs {expected} corner frequencies, got {len(self.corners)}")
        nyquist = self.fs / 2
        for corner in self.corners:
            if not 0 < corner < nyquist:
                raise ValueError(f"corner {corner} Hz outside (0, {nyquist}) Hz")
        if self.kind == "bandpass" and self.corners[0] >= self.corners[1]:
            raise ValueError("bandpass corners must be increasing")
        if self.sos.ndim != 2 or self.sos.shape[1] != 6:
            raise ValueError(f"sos must have shape [n_sections, 6], got {self.sos.shape}")
        # Pole tiap section harus di dalam lingkaran satuan
        for section in self.sos:
            poles = np.roots(section[3:])
            if poles.size and np.max(np.abs(poles)) >= 1.0:
                raise ValueError("unstable second-order section")
        return self

    @property
    def padlen(self) -> int:
        return 3 * (self.order + 1)
