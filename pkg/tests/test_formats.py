import jsonschema
import pytest

from tempme.formats import SCHEMAS, load_schema, validate


@pytest.mark.parametrize("name", SCHEMAS)
def test_shipped_schemas_are_valid(name):
    jsonschema.Draft202012Validator.check_schema(load_schema(name))


def test_validation_rejects_bad_documents():
    with pytest.raises(jsonschema.ValidationError):
        validate({"step": -1, "loss": 1.0, "r1": 0.0}, "train_log")
    with pytest.raises(KeyError):
        load_schema("nope")
