#!/usr/bin/env python3
"""Validate the protocol schema and its fixture cases with the reference jsonschema package."""

import json
import sys

import jsonschema


def main(schema_path, cases_path):
    with open(schema_path) as f:
        schema = json.load(f)
    with open(cases_path) as f:
        cases = json.load(f)
    jsonschema.Draft7Validator.check_schema(schema)
    validator = jsonschema.Draft7Validator(schema)
    failures = 0
    for expected, docs in (("valid", cases["valid"]), ("invalid", cases["invalid"])):
        for doc in docs:
            ok = validator.is_valid(doc)
            if ok != (expected == "valid"):
                failures += 1
                print(f"expected {expected}: {json.dumps(doc)}")
    print(f"{len(cases['valid']) + len(cases['invalid'])} cases, {failures} mismatches")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1], sys.argv[2]))
