__TOOL_META__ = {
    "name": "sleep_seconds",
    "description": "Sleeps for the requested number of seconds.",
    "dependencies": [],
}

import time

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    seconds: float = Field(..., description="How long to sleep")


class OutputModel(BaseModel):
    slept: float = Field(..., description="Seconds slept")


def run(input: InputModel) -> OutputModel:
    time.sleep(input.seconds)
    return OutputModel(slept=input.seconds)
