#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "mtml/error.hpp"

namespace mtml {

// Throws ConfigError if `j` is not an object or has a key outside `known`.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw Error(ErrorCode::ConfigError, "unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace mtml
