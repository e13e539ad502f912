"""Few-shot multimodal harness for image-based anomaly detection.

Four prompting approaches of increasing structure are supported for binary
(wildfire) classification: a bare question, an engineered persona prompt,
labeled exemplar images, and labeled exemplars with per-image explanations.
Verdicts are parsed from free text with a rule cascade and scored over rounds
of 5 positive + 5 negative queries.
"""

from __future__ import annotations

import base64
import csv
import enum
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .errors import Cancelled, InsufficientData, InvalidInput
from .gateway import (ChatMessage, ChatProvider, ChatRequest, ContentPart,
                      ImagePart, TextPart)


class SAApproach(enum.IntEnum):
    """The four prompting approaches, in increasing structural order."""

    DIRECT = 1
    DIRECT_ENGINEERED = 2
    FEW_SHOT_LABELED = 3
    FEW_SHOT_EXPLAINED = 4


@dataclass(frozen=True)
class LabeledExemplar:
    image: ImagePart
    label: bool
    explanation: Optional[str] = None


@dataclass(frozen=True)
class SAPromptConfig:
    """All prompt text is configuration; these defaults follow the shipped
    wildfire setup."""

    dataset_description: str = (
        "This dataset contains satellite images about wildfire in Canada,"
        " using Longitude and Latitude coordinates for each wildfire spot"
        " (> 0.01 acres burned) found. Areas after wildfire may demonstrate"
        " different color in satellite images."
    )
    persona: str = ("You are a professor of forestry, and good at observing"
                    " satellite images.")
    exemplar_intro: str = (
        "I will give you several examples of satellite images with \"yes\" or"
        " \"no\" to specify if wildfire happened."
    )
    direct_question: str = "Had wildfire happened in this picture?"
    step_question: str = ("Now, let's think step by step, and tell me, had"
                          " wildfire happened in the last picture?")

    def truths_sentence(self, labels: Sequence[bool]) -> str:
        rendered = ", ".join(f'"{"yes" if lab else "no"}"' for lab in labels)
        return (f"The truths of the first {len(labels)} images are"
                f" {rendered}.")


def build_sa_prompt(approach: SAApproach,
                    exemplars: Sequence[LabeledExemplar],
                    query_image: ImagePart,
                    config: Optional[SAPromptConfig] = None
                    ) -> list[ChatMessage]:
    """Assemble the message list for one query under the given approach."""
    config = config or SAPromptConfig()
    if query_image.data is None and query_image.url is None:
        raise InvalidInput("query image carries no payload")
    few_shot = approach in (SAApproach.FEW_SHOT_LABELED,
                            SAApproach.FEW_SHOT_EXPLAINED)
    if few_shot and not exemplars:
        raise InvalidInput(f"approach {approach.value} needs exemplars")
    if not few_shot and exemplars:
        raise InvalidInput(f"approach {approach.value} takes no exemplars")
    if approach == SAApproach.FEW_SHOT_EXPLAINED:
        missing = [i for i, ex in enumerate(exemplars) if not ex.explanation]
        if missing:
            raise InvalidInput(
                f"exemplars {missing} lack the explanation this approach needs"
            )

    if approach == SAApproach.DIRECT:
        return [ChatMessage(role="user", parts=(
            query_image, TextPart(config.direct_question),
        ))]

    system_lines = [config.dataset_description, config.persona]
    user_parts: list[ContentPart] = []
    if few_shot:
        system_lines[1] = f"{config.persona} {config.exemplar_intro}"
        system_lines.append(
            config.truths_sentence([ex.label for ex in exemplars])
        )
        for exemplar in exemplars:
            user_parts.append(exemplar.image)
            if approach == SAApproach.FEW_SHOT_EXPLAINED:
                user_parts.append(TextPart(exemplar.explanation or ""))
    user_parts.append(query_image)
    user_parts.append(TextPart(config.step_question))
    return [
        ChatMessage.text("system", "\n".join(system_lines)),
        ChatMessage(role="user", parts=tuple(user_parts)),
    ]


# ---------------------------------------------------------------------------
# Verdict parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerdictLexicon:
    affirmative: tuple[str, ...] = (
        "wildfires have occurred",
        "wildfire has occurred",
        "wildfire have occurred",
        "wildfire occurred",
        "wildfire happened",
        "evidence of wildfire",
        "signs of a wildfire",
        "signs of wildfire",
    )
    negative: tuple[str, ...] = (
        "no wildfire",
        "no evidence of wildfire",
        "had not",
        "has not occurred",
        "not occurred",
        "did not occur",
        "unlikely that a wildfire",
    )


_TOKEN = re.compile(r"[a-z]+")


def parse_label(text: str, lexicon: Optional[VerdictLexicon] = None) -> str:
    """Map free text onto {"yes", "no", "abstain"} with a rule cascade:
    standalone yes/no token first, then the phrase lexicon, else abstain."""
    lexicon = lexicon or VerdictLexicon()
    lowered = text.lower()
    tokens = set(_TOKEN.findall(lowered))
    has_yes = "yes" in tokens
    has_no = "no" in tokens
    if has_yes != has_no:
        return "yes" if has_yes else "no"
    affirmative = any(phrase in lowered for phrase in lexicon.affirmative)
    negative = any(phrase in lowered for phrase in lexicon.negative)
    if affirmative != negative:
        return "yes" if affirmative else "no"
    return "abstain"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestItem:
    path: str
    label: bool


def load_manifest(path: Union[str, Path]) -> list[ManifestItem]:
    """Read a `path,label` CSV manifest (header row optional, label in {0,1})."""
    items = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path":
                continue
            if len(row) < 2:
                raise InvalidInput(f"manifest row needs path,label: {row!r}")
            label = row[1].strip()
            if label not in ("0", "1"):
                raise InvalidInput(f"label must be 0 or 1, got {label!r}")
            items.append(ManifestItem(path=row[0].strip(), label=label == "1"))
    return items


_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg",
                ".gif": "image/gif", ".webp": "image/webp"}


def load_image(path: Union[str, Path]) -> ImagePart:
    path = Path(path)
    media_type = _MEDIA_TYPES.get(path.suffix.lower(), "image/png")
    payload = base64.b64encode(path.read_bytes()).decode("ascii")
    return ImagePart(media_type=media_type, data=payload)


@dataclass(frozen=True)
class ItemResult:
    path: str
    truth: bool
    response: str
    verdict: str   # yes | no | abstain
    correct: bool


@dataclass(frozen=True)
class EvalRound:
    items: tuple[ItemResult, ...]

    def __post_init__(self) -> None:
        if len(self.items) != 10:
            raise InvalidInput(f"a round has exactly 10 items, got {len(self.items)}")

    @property
    def accuracy(self) -> float:
        return sum(1 for item in self.items if item.correct) / len(self.items)


@dataclass(frozen=True)
class SAEvalReport:
    approach: SAApproach
    seed: int
    rounds: tuple[EvalRound, ...]

    @property
    def mean_accuracy(self) -> float:
        return sum(r.accuracy for r in self.rounds) / len(self.rounds)

    def to_dict(self) -> dict:
        return {
            "approach": int(self.approach),
            "seed": self.seed,
            "mean_accuracy": self.mean_accuracy,
            "rounds": [
                {
                    "accuracy": r.accuracy,
                    "items": [
                        {"path": i.path, "truth": i.truth, "response": i.response,
                         "verdict": i.verdict, "correct": i.correct}
                        for i in r.items
                    ],
                }
                for r in self.rounds
            ],
        }


POSITIVES_PER_ROUND = 5
NEGATIVES_PER_ROUND = 5
DEFAULT_EXEMPLAR_SPLIT = (3, 2)  # positives, negatives

DEFAULT_EXPLANATIONS = {
    True: ("Discolored, darkened patches with irregular boundaries mark burned"
           " vegetation in this image."),
    False: ("Vegetation color and texture are uniform here, with no burn scars"
            " visible."),
}


def evaluate(approach: SAApproach,
             manifest: Sequence[ManifestItem],
             rounds: int,
             model: ChatProvider,
             seed: int = 0,
             *,
             exemplars: Optional[Sequence[LabeledExemplar]] = None,
             config: Optional[SAPromptConfig] = None,
             lexicon: Optional[VerdictLexicon] = None,
             temperature: float = 0.0,
             should_stop: Optional[Callable[[], bool]] = None) -> SAEvalReport:
    """Run seeded multi-round evaluation: 5 positive + 5 negative queries per
    round, sampled without replacement within a round; abstain scores as
    incorrect.  Exemplars are fixed for the whole run."""
    if rounds < 1:
        raise InvalidInput(f"rounds must be >= 1, got {rounds}")
    approach = SAApproach(approach)
    rng = random.Random(seed)
    positives = [m for m in manifest if m.label]
    negatives = [m for m in manifest if not m.label]

    few_shot = approach in (SAApproach.FEW_SHOT_LABELED,
                            SAApproach.FEW_SHOT_EXPLAINED)
    if few_shot and exemplars is None:
        n_pos, n_neg = DEFAULT_EXEMPLAR_SPLIT
        if len(positives) < n_pos + POSITIVES_PER_ROUND or \
                len(negatives) < n_neg + NEGATIVES_PER_ROUND:
            raise InsufficientData(
                f"need {n_pos + POSITIVES_PER_ROUND} positive and"
                f" {n_neg + NEGATIVES_PER_ROUND} negative images to carve out"
                " exemplars"
            )
        exemplar_items = (rng.sample(positives, n_pos)
                          + rng.sample(negatives, n_neg))
        exemplars = [
            LabeledExemplar(
                image=load_image(item.path), label=item.label,
                explanation=(DEFAULT_EXPLANATIONS[item.label]
                             if approach == SAApproach.FEW_SHOT_EXPLAINED
                             else None),
            )
            for item in exemplar_items
        ]
        taken = {item.path for item in exemplar_items}
        positives = [m for m in positives if m.path not in taken]
        negatives = [m for m in negatives if m.path not in taken]
    if not few_shot:
        exemplars = []

    if len(positives) < POSITIVES_PER_ROUND or len(negatives) < NEGATIVES_PER_ROUND:
        raise InsufficientData(
            f"need at least {POSITIVES_PER_ROUND} positive and"
            f" {NEGATIVES_PER_ROUND} negative images, have"
            f" {len(positives)}/{len(negatives)}"
        )

    round_results = []
    for _ in range(rounds):
        picked = (rng.sample(positives, POSITIVES_PER_ROUND)
                  + rng.sample(negatives, NEGATIVES_PER_ROUND))
        items = []
        for item in picked:
            if should_stop is not None and should_stop():
                raise Cancelled("evaluation cancelled between items")
            messages = build_sa_prompt(approach, exemplars or [],
                                       load_image(item.path), config)
            request = ChatRequest(messages=tuple(messages),
                                  temperature=temperature)
            response = model.chat(request).message.text_content
            verdict = parse_label(response, lexicon)
            correct = verdict == ("yes" if item.label else "no")
            items.append(ItemResult(path=item.path, truth=item.label,
                                    response=response, verdict=verdict,
                                    correct=correct))
        round_results.append(EvalRound(items=tuple(items)))
    return SAEvalReport(approach=approach, seed=seed,
                        rounds=tuple(round_results))
