// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "mdpo/errors.hpp"

namespace mdpo {

/// Rejects unknown keys so a misspelled config field aborts before any
/// compute instead of silently using a default.
inline void require_known_keys(const nlohmann::json& obj,
                               std::initializer_list<const char*> allowed,
                               const std::string& context) {
    if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (const auto& [key, _] : obj.items()) {
        bool known = false;
        for (const char* k : allowed) {
            if (key == k) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError(context + ": unknown key \"" + key + "\"");
    }
}

template <class T>
T json_get_or(const nlohmann::json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid value for \"") + key + "\": " + e.what());
    }
}

inline nlohmann::json parse_json(const std::string& text, const std::string& context) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError(context + ": malformed JSON");
    return j;
}

}  // namespace mdpo
