from __future__ import annotations

from dataclasses import dataclass

DIAGNOSIS_PROMPT = (
    "Please analyze this fundus image and determine the severity level of Diabetic Retinopathy. "
    "Provide a detailed explanation for your diagnosis."
)
CONCEPT_PROMPT = (
    "Identify and describe all Diabetic Retinopathy-related pathological concepts present in this image, "
    "such as hemorrhages, exudates, microaneurysms, cotton wool spots, or neovascularization. "
    "Point out their locations and features."
)
GENERIC_PROMPT = "Describe this image."

PROMPTS = {"diagnosis": DIAGNOSIS_PROMPT, "concept": CONCEPT_PROMPT, "generic": GENERIC_PROMPT}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str


def get_prompt(name: str) -> PromptTemplate:
    if name not in PROMPTS:
        raise KeyError(f"unknown prompt {name!r}; expected one of {sorted(PROMPTS)}")
    return PromptTemplate(name, PROMPTS[name])
