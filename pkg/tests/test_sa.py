from __future__ import annotations

import base64
import json

import pytest

from gridllm.errors import Cancelled, InsufficientData, InvalidInput
from gridllm.gateway import (ChatRequest, ImagePart, ScriptedProvider,
                             TextPart, message_to_wire)
from gridllm.sa import (DEFAULT_EXEMPLAR_SPLIT, LabeledExemplar, ManifestItem,
                        SAApproach, SAPromptConfig, VerdictLexicon,
                        build_sa_prompt, evaluate, load_image, load_manifest,
                        parse_label)

FIG5_ANSWER = ("...Considering this observation, it is likely that the last"
               " picture depicts an area where wildfires have occurred.")


def _img(tag: str) -> ImagePart:
    return ImagePart(media_type="image/png",
                     data=base64.b64encode(tag.encode()).decode())


def _exemplars(with_explanations: bool) -> list[LabeledExemplar]:
    labels = [True, True, True, False, False]
    return [
        LabeledExemplar(
            image=_img(f"exemplar-{i}"), label=label,
            explanation=(f"Explanation for exemplar {i}."
                         if with_explanations else None),
        )
        for i, label in enumerate(labels, start=1)
    ]


class TestPromptStructures:
    @pytest.mark.parametrize("approach,with_expl", [
        (SAApproach.DIRECT, False),
        (SAApproach.DIRECT_ENGINEERED, False),
        (SAApproach.FEW_SHOT_LABELED, False),
        (SAApproach.FEW_SHOT_EXPLAINED, True),
    ])
    def test_matches_golden_structure(self, approach, with_expl, golden_dir):
        exemplars = _exemplars(with_expl) if approach.value >= 3 else []
        messages = build_sa_prompt(approach, exemplars, _img("query-image"))
        wire = [message_to_wire(m) for m in messages]
        golden = json.loads(
            (golden_dir / f"sa_approach_{approach.value}.json").read_text())
        assert wire == golden

    def test_direct_is_single_user_message(self):
        (message,) = build_sa_prompt(SAApproach.DIRECT, [], _img("q"))
        assert message.role == "user"
        kinds = [type(p) for p in message.parts]
        assert kinds == [ImagePart, TextPart]

    def test_truths_sentence_follows_labels(self):
        config = SAPromptConfig()
        sentence = config.truths_sentence([True, False, True])
        assert sentence == ('The truths of the first 3 images are "yes", "no",'
                            ' "yes".')

    def test_structural_monotonicity(self):
        """Approach 4 contains every block of 3, which contains every block
        of 2 (same system sentences, same exemplar images, same question)."""
        query = _img("query-image")
        m2 = build_sa_prompt(SAApproach.DIRECT_ENGINEERED, [], query)
        m3 = build_sa_prompt(SAApproach.FEW_SHOT_LABELED, _exemplars(False),
                             query)
        m4 = build_sa_prompt(SAApproach.FEW_SHOT_EXPLAINED, _exemplars(True),
                             query)

        def payload(messages):
            parts = []
            for m in messages:
                for p in m.parts:
                    parts.append(p.text if isinstance(p, TextPart) else p.data)
            sys_text = "\n".join(m.parts[0].text for m in messages
                                 if m.role == "system")
            return set(parts), sys_text

        parts2, sys2 = payload(m2)
        parts3, sys3 = payload(m3)
        parts4, sys4 = payload(m4)
        # Every system sentence survives into the richer approaches.
        assert all(line in sys3 for line in sys2.splitlines())
        assert all(line in sys4 for line in sys3.splitlines())
        images3 = {p.data for m in m3 for p in m.parts
                   if isinstance(p, ImagePart)}
        images4 = {p.data for m in m4 for p in m.parts
                   if isinstance(p, ImagePart)}
        assert images3 <= images4
        assert parts3 <= parts4

    def test_exemplar_count_must_match_approach(self):
        with pytest.raises(InvalidInput):
            build_sa_prompt(SAApproach.DIRECT, _exemplars(False), _img("q"))
        with pytest.raises(InvalidInput):
            build_sa_prompt(SAApproach.FEW_SHOT_LABELED, [], _img("q"))

    def test_explanations_required_for_approach_four(self):
        with pytest.raises(InvalidInput):
            build_sa_prompt(SAApproach.FEW_SHOT_EXPLAINED, _exemplars(False),
                            _img("q"))


class TestParseLabel:
    def test_fig5_answer_is_yes(self):
        assert parse_label(FIG5_ANSWER) == "yes"

    def test_bare_no(self):
        assert parse_label("No.") == "no"

    def test_bare_yes_case_insensitive(self):
        assert parse_label("YES, definitely.") == "yes"

    def test_unclear_abstains(self):
        assert parse_label("It is unclear.") == "abstain"

    def test_both_tokens_fall_through_to_lexicon(self):
        text = "Yes and no... but overall there is no wildfire in this image."
        assert parse_label(text) == "no"

    def test_conflicting_lexicon_abstains(self):
        # No standalone yes/no token, and both lexicon sides match.
        text = ("Some areas suggest wildfires have occurred while others show"
                " that fire had not touched them.")
        assert parse_label(text) == "abstain"

    def test_custom_lexicon(self):
        lexicon = VerdictLexicon(affirmative=("burn scar",), negative=())
        assert parse_label("clear burn scar visible", lexicon) == "yes"

    def test_negative_phrases(self):
        assert parse_label("The area had not burned recently.") == "no"


def _manifest_files(tmp_path, n_pos: int, n_neg: int) -> list[ManifestItem]:
    items = []
    for i in range(n_pos):
        path = tmp_path / f"pos_{i}.png"
        path.write_bytes(f"POSITIVE-{i}".encode())
        items.append(ManifestItem(path=str(path), label=True))
    for i in range(n_neg):
        path = tmp_path / f"neg_{i}.png"
        path.write_bytes(f"NEGATIVE-{i}".encode())
        items.append(ManifestItem(path=str(path), label=False))
    return items


def oracle_provider() -> ScriptedProvider:
    """Answers correctly by decoding the query image payload (which also
    proves the image bytes reach the provider)."""

    def rule(request: ChatRequest):
        images = [p for m in request.messages for p in m.parts
                  if isinstance(p, ImagePart)]
        payload = base64.b64decode(images[-1].data).decode()
        return "Yes." if payload.startswith("POSITIVE") else "No."

    return ScriptedProvider(rules=[rule])


class TestEvaluate:
    def test_oracle_provider_scores_one(self, tmp_path):
        manifest = _manifest_files(tmp_path, 8, 7)
        report = evaluate(SAApproach.DIRECT, manifest, rounds=3,
                          model=oracle_provider(), seed=0)
        assert report.mean_accuracy == 1.0
        for r in report.rounds:
            assert r.accuracy == 1.0
            assert sum(1 for item in r.items if item.truth) == 5

    def test_nine_of_ten_scores_point_nine(self, tmp_path):
        manifest = _manifest_files(tmp_path, 6, 6)
        inner = oracle_provider()
        calls = {"n": 0}

        def flip_first(request: ChatRequest):
            calls["n"] += 1
            answer = inner.chat(request).message.text_content
            if calls["n"] == 1:
                return "No." if answer == "Yes." else "Yes."
            return answer

        report = evaluate(SAApproach.DIRECT, manifest, rounds=1,
                          model=ScriptedProvider(rules=[flip_first]), seed=1)
        assert report.rounds[0].accuracy == 0.9
        assert report.mean_accuracy == 0.9

    def test_abstain_scores_as_incorrect(self, tmp_path):
        manifest = _manifest_files(tmp_path, 5, 5)
        report = evaluate(SAApproach.DIRECT, manifest, rounds=1,
                          model=ScriptedProvider.always("It is unclear."),
                          seed=0)
        assert report.rounds[0].accuracy == 0.0
        assert all(item.verdict == "abstain" for item in report.rounds[0].items)

    def test_seeded_sampling_reproducible(self, tmp_path):
        manifest = _manifest_files(tmp_path, 9, 9)
        a = evaluate(SAApproach.DIRECT, manifest, rounds=2,
                     model=oracle_provider(), seed=7)
        b = evaluate(SAApproach.DIRECT, manifest, rounds=2,
                     model=oracle_provider(), seed=7)
        assert [[i.path for i in r.items] for r in a.rounds] == \
            [[i.path for i in r.items] for r in b.rounds]
        c = evaluate(SAApproach.DIRECT, manifest, rounds=2,
                     model=oracle_provider(), seed=8)
        assert [[i.path for i in r.items] for r in a.rounds] != \
            [[i.path for i in r.items] for r in c.rounds]

    def test_no_replacement_within_round(self, tmp_path):
        manifest = _manifest_files(tmp_path, 7, 7)
        report = evaluate(SAApproach.DIRECT, manifest, rounds=4,
                          model=oracle_provider(), seed=3)
        for r in report.rounds:
            paths = [item.path for item in r.items]
            assert len(set(paths)) == 10

    def test_few_shot_reserves_exemplars(self, tmp_path):
        n_pos, n_neg = DEFAULT_EXEMPLAR_SPLIT
        manifest = _manifest_files(tmp_path, 5 + n_pos, 5 + n_neg)
        report = evaluate(SAApproach.FEW_SHOT_EXPLAINED, manifest, rounds=1,
                          model=oracle_provider(), seed=0)
        assert report.rounds[0].accuracy == 1.0

    def test_insufficient_data(self, tmp_path):
        manifest = _manifest_files(tmp_path, 4, 5)
        with pytest.raises(InsufficientData):
            evaluate(SAApproach.DIRECT, manifest, rounds=1,
                     model=oracle_provider(), seed=0)
        manifest = _manifest_files(tmp_path, 7, 6)  # not enough after exemplars
        with pytest.raises(InsufficientData):
            evaluate(SAApproach.FEW_SHOT_LABELED, manifest, rounds=1,
                     model=oracle_provider(), seed=0)

    def test_cancellation(self, tmp_path):
        manifest = _manifest_files(tmp_path, 5, 5)
        with pytest.raises(Cancelled):
            evaluate(SAApproach.DIRECT, manifest, rounds=1,
                     model=oracle_provider(), seed=0,
                     should_stop=lambda: True)

    def test_report_serialization(self, tmp_path):
        manifest = _manifest_files(tmp_path, 5, 5)
        report = evaluate(SAApproach.DIRECT, manifest, rounds=1,
                          model=oracle_provider(), seed=0)
        payload = report.to_dict()
        assert payload["approach"] == 1
        assert payload["mean_accuracy"] == 1.0
        assert len(payload["rounds"][0]["items"]) == 10


class TestManifest:
    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("path,label\na.png,1\nb.png,0\n")
        items = load_manifest(path)
        assert items == [ManifestItem("a.png", True),
                         ManifestItem("b.png", False)]

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a.png,2\n")
        with pytest.raises(InvalidInput):
            load_manifest(path)

    def test_load_image_media_type(self, tmp_path):
        path = tmp_path / "x.jpg"
        path.write_bytes(b"fakejpeg")
        part = load_image(path)
        assert part.media_type == "image/jpeg"
        assert base64.b64decode(part.data) == b"fakejpeg"
