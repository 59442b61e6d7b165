import collections
import json
import random
from pathlib import Path

import pytest

from volmo.errors import InputError, UnknownCondition, UnsupportedDisease
from volmo.instruction_schema import (
    CANONICAL_CONDITIONS,
    ConversionSpec,
    build_screening_prompt,
    build_staging_prompt,
    canonical_condition,
    convert_benchmark,
    merge_manifests,
    read_label_table,
    seeded_split,
    write_conversion,
)

GOLDEN = Path(__file__).parent / "data"


class TestConditionVocabulary:
    def test_twelve_conditions(self):
        assert len(CANONICAL_CONDITIONS) == 12

    def test_aliases(self):
        assert canonical_condition("age-related macular degeneration") == "AMD"
        assert canonical_condition("Diabetic Retinopathy") == "DR"
        assert canonical_condition("GLAUCOMA") == "glaucoma"

    def test_unknown(self):
        with pytest.raises(UnknownCondition):
            canonical_condition("cataract")


class TestScreeningPrompt:
    def test_myopic_fundus_cfp_matches_golden(self):
        expected = (GOLDEN / "golden_screening_myopic_cfp.txt").read_text(encoding="utf-8")
        assert build_screening_prompt("myopic fundus", "CFP") == expected.removesuffix("\n")

    def test_exact_string(self):
        assert build_screening_prompt("myopic fundus", "CFP") == (
            "This is a colorful fundus image. \n"
            "Please tell me whether this image shows myopic fundus. \n"
            "Answer in format: TRUE or FALSE."
        )

    def test_dr_expands_display_name(self):
        prompt = build_screening_prompt("DR", "CFP")
        assert "whether this image shows diabetic retinopathy." in prompt

    def test_unknown_condition(self):
        with pytest.raises(UnknownCondition):
            build_screening_prompt("cataract", "CFP")

    def test_body_variant(self):
        prompt = build_screening_prompt("drusen", "CFP", variant="body")
        assert prompt.endswith("Answer in the format: TRUE or FALSE.")

    def test_oct_modality_sentence(self):
        prompt = build_screening_prompt("macular edema", "OCT")
        assert prompt.startswith("This is an OCT image. \n")

    def test_constant_per_condition_modality(self):
        a = build_screening_prompt("drusen", "CFP")
        b = build_screening_prompt("drusen", "CFP")
        assert a == b


class TestStagingPrompt:
    def test_dr_matches_golden(self):
        expected = (GOLDEN / "golden_staging_dr.txt").read_text(encoding="utf-8")
        assert build_staging_prompt("DR") == expected.removesuffix("\n")

    def test_dr_scale_lines(self):
        prompt = build_staging_prompt("DR")
        assert "on a scale of 0 to 4" in prompt
        for line in ("0 - No DR", "1 - Mild", "2 - ModeRate", "3 - Severe",
                     "4 - Proliferative DR"):
            assert line in prompt
        assert prompt.endswith(
            "Your response should only contain a single number, representing your rating."
        )

    def test_macular_hole_stage_list(self):
        prompt = build_staging_prompt("macular_hole")
        assert "on a scale of 2 to 4" in prompt
        assert "0 -" not in prompt and "1 -" not in prompt
        for stage in (2, 3, 4):
            assert f"{stage} - " in prompt

    def test_unsupported(self):
        with pytest.raises(UnsupportedDisease):
            build_staging_prompt("glaucoma")


def binary_spec(**kwargs):
    defaults = dict(
        dataset_name="SYNTH",
        modality="CFP",
        label_schema="binary_condition",
        condition="DR",
        label_column="label",
        split_column="split",
    )
    defaults.update(kwargs)
    return ConversionSpec(**defaults)


def staging_spec(**kwargs):
    defaults = dict(
        dataset_name="SYNTH-STAGE",
        modality="CFP",
        label_schema="stage_0_4",
        disease="DR",
        label_column="stage",
        split_column="split",
    )
    defaults.update(kwargs)
    return ConversionSpec(**defaults)


def make_binary_records(n, seed=0):
    rng = random.Random(seed)
    return [
        {"image_ref": f"img/{i:05d}.jpg", "label": rng.choice(["TRUE", "FALSE"]),
         "split": rng.choice(["train", "test"])}
        for i in range(n)
    ]


class TestConvertBenchmark:
    def test_counts_reconciled(self):
        records = make_binary_records(15201)
        result = convert_benchmark(records, binary_spec(dataset_name="BRSET-shaped"))
        assert result.manifest.image_count == 15201
        assert len(result.screening) == 15201
        assert result.rejects == []

    def test_stage_out_of_range_rejected(self):
        records = [{"image_ref": "a.jpg", "stage": 5, "split": "test"}]
        result = convert_benchmark(records, staging_spec())
        assert result.staging == []
        assert result.rejects[0]["reason"] == "LabelOutOfRange"

    def test_missing_image_ref_rejected(self):
        records = [{"image_ref": "", "label": "TRUE", "split": "train"}]
        result = convert_benchmark(records, binary_spec())
        assert result.rejects[0]["reason"] == "MissingImageRef"

    def test_cardinality_preserved(self):
        records = make_binary_records(1000)
        for i in range(0, 1000, 97):
            records[i]["label"] = "maybe"  # nonsense label -> reject
        result = convert_benchmark(records, binary_spec())
        assert len(result.instances) + len(result.rejects) == 1000

    def test_gold_histogram_matches_source(self):
        records = make_binary_records(1000, seed=3)
        result = convert_benchmark(records, binary_spec())
        src = collections.Counter(r["label"] for r in records)
        got = collections.Counter(i.gold for i in result.screening)
        assert got == src

    def test_stage_histogram_matches_source(self):
        rng = random.Random(5)
        records = [
            {"image_ref": f"i{i}.png", "stage": rng.randint(0, 4), "split": "train"}
            for i in range(500)
        ]
        result = convert_benchmark(records, staging_spec())
        src = collections.Counter(r["stage"] for r in records)
        got = collections.Counter(i.gold for i in result.staging)
        assert got == src

    def test_gold_round_trip_via_json(self):
        records = make_binary_records(50)
        result = convert_benchmark(records, binary_spec())
        for rec, inst in zip(records, result.screening):
            reparsed = json.loads(json.dumps(inst.to_json_dict()))
            assert reparsed["gold"] == rec["label"]

    def test_fan_out_multi_condition(self):
        records = [
            {"image_ref": "x.jpg", "dr": "1", "amd": "0", "split": "train"},
            {"image_ref": "y.jpg", "dr": "0", "amd": "1", "split": "test"},
        ]
        spec = binary_spec(condition=None, label_column=None,
                           condition_columns={"DR": "dr", "AMD": "amd"})
        result = convert_benchmark(records, spec)
        assert len(result.screening) == 4
        conditions = {(i.image_ref, i.condition, i.gold) for i in result.screening}
        assert ("x.jpg", "DR", "TRUE") in conditions
        assert ("y.jpg", "AMD", "TRUE") in conditions

    def test_source_split_preserved(self):
        records = [{"image_ref": "a.jpg", "label": "TRUE", "split": "test"}]
        result = convert_benchmark(records, binary_spec())
        assert result.screening[0].split == "test"
        assert result.manifest.split_source == "source"

    def test_seeded_split_recorded_and_deterministic(self):
        records = [{"image_ref": f"i{i}.png", "label": "TRUE"} for i in range(500)]
        spec = binary_spec(split_column=None, split_seed=99)
        r1 = convert_benchmark(records, spec)
        r2 = convert_benchmark(records, spec)
        assert [i.split for i in r1.screening] == [i.split for i in r2.screening]
        assert r1.manifest.split_source == "seeded_80_20"
        assert r1.manifest.split_seed == 99
        train_frac = sum(i.split == "train" for i in r1.screening) / 500
        assert 0.72 < train_frac < 0.88

    def test_prompts_constant_within_dataset(self):
        records = make_binary_records(20)
        result = convert_benchmark(records, binary_spec())
        assert len({i.prompt for i in result.screening}) == 1

    def test_macular_hole_provenance_flag(self):
        records = [{"image_ref": "m.png", "stage": 3, "split": "test"}]
        spec = staging_spec(label_schema="stage_2_4", disease="macular_hole")
        result = convert_benchmark(records, spec)
        assert result.staging[0].prompt_provenance == "extrapolated"

    def test_spec_validation(self):
        with pytest.raises(InputError):
            ConversionSpec(dataset_name="x", modality="CFP", label_schema="binary_condition")
        with pytest.raises(InputError):
            ConversionSpec(dataset_name="x", modality="CFP", label_schema="stage_0_4",
                           disease="macular_hole", label_column="s")


class TestManifestMerge:
    def test_stage2_footprint(self):
        sizes = {"BRSET": 15201, "OIMHS": 2933, "FIVES": 240, "EyePACS": 8555}
        manifests = []
        for name, size in sizes.items():
            records = make_binary_records(size)
            result = convert_benchmark(records, binary_spec(dataset_name=name))
            manifests.append(result.manifest)
        merged = merge_manifests(manifests)
        assert merged["total_instances"] == 26929


class TestTableIO:
    def test_csv_round_trip(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("image_ref,label,split\na.jpg,TRUE,train\nb.jpg,FALSE,test\n")
        records = list(read_label_table(csv_path))
        assert records == [
            {"image_ref": "a.jpg", "label": "TRUE", "split": "train"},
            {"image_ref": "b.jpg", "label": "FALSE", "split": "test"},
        ]

    def test_jsonl(self, tmp_path):
        p = tmp_path / "labels.jsonl"
        p.write_text('{"image_ref": "a.jpg", "label": "TRUE", "split": "train"}\n')
        assert list(read_label_table(p))[0]["image_ref"] == "a.jpg"

    def test_write_conversion(self, tmp_path):
        records = make_binary_records(10)
        result = convert_benchmark(records, binary_spec())
        paths = write_conversion(result, tmp_path)
        assert len(paths["screening"].read_text().splitlines()) == 10
        manifest = json.loads(paths["manifest"].read_text())
        assert manifest["image_count"] == 10


class TestSeededSplit:
    def test_deterministic(self):
        assert seeded_split(1, "img.png") == seeded_split(1, "img.png")

    def test_seed_sensitivity(self):
        refs = [f"i{i}" for i in range(400)]
        a = [seeded_split(1, r) for r in refs]
        b = [seeded_split(2, r) for r in refs]
        assert a != b
