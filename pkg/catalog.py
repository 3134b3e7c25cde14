# Copyright 2026 The damped-transport-mc Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Catalog identifiers of the form ``name`` or ``name:arg,key=value``."""

from errors import CatalogError


def _parse_value(text):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_catalog_id(identifier):
    if not isinstance(identifier, str) or identifier.strip() == "":
        raise CatalogError("Catalog id must be a non-empty string, got {!r}".format(identifier))

    name, _, arg_text = identifier.partition(":")
    args = []
    kwargs = {}
    for item in arg_text.split(","):
        if item.strip() == "":
            continue
        if "=" in item:
            key, value = item.split("=", 1)
            kwargs[key.strip()] = _parse_value(value)
        else:
            args.append(_parse_value(item))

    return name.strip().lower(), args, kwargs


def build_from_catalog(registry, identifier, kind):
    name, args, kwargs = parse_catalog_id(identifier)
    if name not in registry:
        raise CatalogError(
            "Unknown {} id '{}'. Known names: {}".format(kind, identifier, ", ".join(sorted(registry)))
        )

    try:
        return registry[name](*args, **kwargs)
    except TypeError as e:
        raise CatalogError("Invalid arguments for {} id '{}': {}".format(kind, identifier, e)) from e
