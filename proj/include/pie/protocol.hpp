#pragma once

// Live-session message protocol: a validator for the JSON Schema subset used
// by schema/protocol.json, plus builders for every server message.

#include "pie/render.hpp"

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifndef PIE_SCHEMA_DIR
#define PIE_SCHEMA_DIR "schema"
#endif

namespace pie {

using Json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;

/// Validates JSON documents against a draft-07 schema restricted to the
/// keywords below. Loading a schema that uses any other keyword fails, so the
/// validator can never silently ignore part of the published contract.
class SchemaValidator {
 public:
  explicit SchemaValidator(Json schema) : root_(std::move(schema)) { check_keywords(root_, "#"); }

  static SchemaValidator from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open schema '" + path + "'");
    return SchemaValidator(Json::parse(in));
  }

  /// The published protocol schema.
  static const SchemaValidator& protocol() {
    static const SchemaValidator v = from_file(std::string(PIE_SCHEMA_DIR) + "/protocol.json");
    return v;
  }

  /// Empty when valid, otherwise the first violation found.
  std::optional<std::string> check(const Json& doc) const { return check(doc, root_, "$"); }

  /// Validates against `#/definitions/<name>`.
  std::optional<std::string> check(const Json& doc, const std::string& definition) const {
    return check(doc, resolve("#/definitions/" + definition), "$");
  }

  bool valid(const Json& doc) const { return !check(doc); }

 private:
  Json root_;

  inline static const std::set<std::string> kKeywords{
      "$schema", "$id", "title", "description", "definitions", "$ref", "type", "properties", "required",
      "additionalProperties", "const", "enum", "minimum", "maximum", "exclusiveMinimum", "items", "minItems",
      "maxItems", "minLength", "minProperties", "oneOf"};

  static void check_keywords(const Json& s, const std::string& where) {
    if (s.is_boolean()) return;
    if (!s.is_object()) throw Error("schema at " + where + " is not an object");
    for (const auto& [key, value] : s.items()) {
      if (!kKeywords.count(key)) throw Error("unsupported schema keyword '" + key + "' at " + where);
      if (key == "definitions" || key == "properties")
        for (const auto& [name, sub] : value.items()) check_keywords(sub, where + "/" + key + "/" + name);
      if (key == "items" || key == "additionalProperties") check_keywords(value, where + "/" + key);
      if (key == "oneOf")
        for (std::size_t i = 0; i < value.size(); ++i) check_keywords(value[i], where + "/oneOf/" + std::to_string(i));
    }
  }

  const Json& resolve(const std::string& ref) const {
    if (ref.rfind("#/", 0) != 0) throw Error("only local schema references are supported: " + ref);
    const Json* node = &root_;
    std::istringstream parts(ref.substr(2));
    std::string part;
    while (std::getline(parts, part, '/')) {
      if (!node->is_object() || !node->contains(part)) throw Error("unresolved schema reference " + ref);
      node = &(*node)[part];
    }
    return *node;
  }

  static bool has_type(const Json& doc, const std::string& t) {
    if (t == "object") return doc.is_object();
    if (t == "array") return doc.is_array();
    if (t == "string") return doc.is_string();
    if (t == "boolean") return doc.is_boolean();
    if (t == "null") return doc.is_null();
    if (t == "number") return doc.is_number();
    if (t == "integer")
      return doc.is_number_integer() || (doc.is_number_float() && std::floor(doc.get<double>()) == doc.get<double>());
    throw Error("unknown schema type '" + t + "'");
  }

  /// JSON equality with numbers compared by value (1 == 1.0), as JSON Schema requires.
  static bool equal(const Json& a, const Json& b) {
    if (a.is_number() && b.is_number()) return a.get<double>() == b.get<double>();
    return a == b;
  }

  std::optional<std::string> check(const Json& doc, const Json& s, const std::string& at) const {
    if (s.is_boolean()) return s.get<bool>() ? std::nullopt : std::optional<std::string>(at + ": not allowed");
    if (s.contains("$ref")) {
      if (auto e = check(doc, resolve(s["$ref"].get<std::string>()), at)) return e;
    }
    if (s.contains("type")) {
      const Json& t = s["type"];
      bool ok = false;
      if (t.is_string())
        ok = has_type(doc, t.get<std::string>());
      else
        for (const auto& x : t) ok = ok || has_type(doc, x.get<std::string>());
      if (!ok) return at + ": expected type " + t.dump();
    }
    if (s.contains("const") && !equal(doc, s["const"])) return at + ": expected " + s["const"].dump();
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& v : s["enum"]) found = found || equal(doc, v);
      if (!found) return at + ": value not in " + s["enum"].dump();
    }
    if (doc.is_number()) {
      const double x = doc.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) return at + ": below minimum";
      if (s.contains("maximum") && x > s["maximum"].get<double>()) return at + ": above maximum";
      if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) return at + ": not above exclusive minimum";
    }
    if (doc.is_string() && s.contains("minLength") &&
        doc.get<std::string>().size() < s["minLength"].get<std::size_t>())
      return at + ": string too short";
    if (doc.is_array()) {
      if (s.contains("minItems") && doc.size() < s["minItems"].get<std::size_t>()) return at + ": too few items";
      if (s.contains("maxItems") && doc.size() > s["maxItems"].get<std::size_t>()) return at + ": too many items";
      if (s.contains("items"))
        for (std::size_t i = 0; i < doc.size(); ++i)
          if (auto e = check(doc[i], s["items"], at + "[" + std::to_string(i) + "]")) return e;
    }
    if (doc.is_object()) {
      if (s.contains("minProperties") && doc.size() < s["minProperties"].get<std::size_t>()) return at + ": too few properties";
      const Json empty = Json::object();
      const Json& props = s.contains("properties") ? s["properties"] : empty;
      // The "type" tag first, so a wrong alternative fails on its discriminator.
      if (doc.contains("type") && props.contains("type"))
        if (auto e = check(doc["type"], props["type"], at + ".type")) return e;
      for (const auto& [key, value] : doc.items()) {
        if (key == "type" && props.contains("type")) continue;
        if (props.contains(key)) {
          if (auto e = check(value, props[key], at + "." + key)) return e;
        } else if (s.contains("additionalProperties")) {
          if (auto e = check(value, s["additionalProperties"], at + "." + key)) return at + ": unexpected key '" + key + "'";
        }
      }
      if (s.contains("required"))
        for (const auto& r : s["required"])
          if (!doc.contains(r.get<std::string>())) return at + ": missing '" + r.get<std::string>() + "'";
    }
    if (s.contains("oneOf")) {
      // Report the failure of an alternative whose "type" tag matched, if any.
      int matches = 0;
      std::string first;
      bool first_tagged = false;
      for (const auto& alt : s["oneOf"]) {
        auto e = check(doc, alt, at);
        if (!e) {
          ++matches;
          continue;
        }
        const bool tagged = e->rfind(at + ".type:", 0) != 0;
        if (first.empty() || (tagged && !first_tagged)) {
          first = *e;
          first_tagged = tagged;
        }
      }
      if (matches == 0) return first.empty() ? at + ": matches no alternative" : first;
      if (matches > 1) return at + ": matches more than one alternative";
    }
    return std::nullopt;
  }
};

// --- encoding -------------------------------------------------------------------------

inline std::string base64_encode(const std::string& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::string::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

inline std::string base64_decode(std::string text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  while (!text.empty() && text.back() == '=') text.pop_back();
  std::string out(It(text.begin()), It(text.end()));
  out.resize(text.size() * 6 / 8);
  return out;
}

/// PNG bytes of `img` (same encoder settings as write_png).
inline std::string encode_png(const Image& img) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGBA;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.rgba.data(), 0, nullptr))
    throw Error("PNG size query failed");
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.rgba.data(), 0, nullptr))
    throw Error("PNG encoding failed");
  out.resize(size);
  return out;
}

inline Image decode_png(const std::string& bytes) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) throw Error("cannot parse PNG data");
  pi.format = PNG_FORMAT_RGBA;
  Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.rgba.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw Error("cannot decode PNG data");
  }
  return img;
}

// --- server messages ----------------------------------------------------------------

namespace msg {

inline Json hello() { return {{"type", "hello"}, {"proto", kProtocolVersion}, {"server", "pie"}}; }

inline Json frame(long seq, long step, const Image& img) {
  return {{"type", "frame"},   {"seq", seq},           {"step", step},
          {"width", img.width}, {"height", img.height}, {"png_base64", base64_encode(encode_png(img))}};
}

inline Json overlay(long seq, const std::vector<OverlayPoint>& pts) {
  Json kernels = Json::array(), ips = Json::array();
  for (const auto& p : pts) {
    Json j = {{"index", p.index}, {"x", p.px}, {"y", p.py}, {"depth", p.depth}};
    (p.kind == OverlayPoint::kernel ? kernels : ips).push_back(std::move(j));
  }
  return {{"type", "overlay"}, {"seq", seq}, {"kernels", kernels}, {"ips", ips}};
}

struct Stats {
  long seq = 0;
  long step = 0;
  bool paused = false;
  int newton_iters = 0;
  double assembly_ms = 0.0;
  double solve_ms = 0.0;
  double warp_render_ms = 0.0;
  double fps = 0.0;
  double volume_ratio = 1.0;
};

inline Json stats(const Stats& s) {
  return {{"type", "stats"},
          {"seq", s.seq},
          {"step", s.step},
          {"paused", s.paused},
          {"newton_iters", s.newton_iters},
          {"assembly_ms", s.assembly_ms},
          {"solve_ms", s.solve_ms},
          {"warp_render_ms", s.warp_render_ms},
          {"fps", s.fps},
          {"volume_ratio", std::isfinite(s.volume_ratio) ? s.volume_ratio : 0.0}};
}

inline Json error(const std::string& code, const std::string& message) {
  return {{"type", "error"}, {"code", code}, {"message", message}};
}

}  // namespace msg
}  // namespace pie
