#pragma once

// Symbolic layer: primitive vocabulary, instruction grammar -> plan,
// strict-JSON plan serialization, and the admissible-index set behind the
// monotone plan pointer.

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsgrid/catalog.hpp"

namespace nsgrid {

enum class PrimitiveOp {
  kPick,
  kPlaceOn,
  kPlaceIn,
  kPlaceRel,
  kOpen,
  kClose,
  kTurnOn,
  kTurnOff,
  kPad,
};

inline constexpr int kNumPrimitiveOps = 9;
inline constexpr int kMaxPlanLength = 6;

inline const char* op_name(PrimitiveOp op) {
  switch (op) {
    case PrimitiveOp::kPick: return "pick";
    case PrimitiveOp::kPlaceOn: return "place_on";
    case PrimitiveOp::kPlaceIn: return "place_in";
    case PrimitiveOp::kPlaceRel: return "place_rel";
    case PrimitiveOp::kOpen: return "open";
    case PrimitiveOp::kClose: return "close";
    case PrimitiveOp::kTurnOn: return "turn_on";
    case PrimitiveOp::kTurnOff: return "turn_off";
    case PrimitiveOp::kPad: return "pad";
  }
  return "?";
}

inline bool op_from_name(const std::string& s, PrimitiveOp* out) {
  for (int i = 0; i < kNumPrimitiveOps; ++i) {
    const auto op = static_cast<PrimitiveOp>(i);
    if (s == op_name(op)) {
      *out = op;
      return true;
    }
  }
  return false;
}

inline bool op_needs_support(PrimitiveOp op) {
  return op == PrimitiveOp::kPlaceOn || op == PrimitiveOp::kPlaceIn ||
         op == PrimitiveOp::kPlaceRel;
}

// One symbolic action unit. Empty string stands for a null argument.
// Relative placements fold the relation into the support id
// ("right_of:plate"), keeping the two-argument schema.
struct Primitive {
  PrimitiveOp op = PrimitiveOp::kPad;
  std::string object;
  std::string support;

  bool operator==(const Primitive& o) const {
    return op == o.op && object == o.object && support == o.support;
  }
};

struct Plan {
  std::vector<Primitive> primitives;
  int length() const { return static_cast<int>(primitives.size()); }
  const Primitive& at(int m) const { return primitives[m - 1]; }  // 1-based
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_arity(const Primitive& p) {
  const bool has_obj = !p.object.empty();
  const bool has_sup = !p.support.empty();
  switch (p.op) {
    case PrimitiveOp::kPad:
      if (has_obj || has_sup)
        throw SchemaError("pad primitive takes no arguments");
      return;
    case PrimitiveOp::kPlaceOn:
    case PrimitiveOp::kPlaceIn:
    case PrimitiveOp::kPlaceRel:
      if (!has_obj || !has_sup)
        throw SchemaError(std::string(op_name(p.op)) +
                          " requires object and support");
      return;
    default:
      if (!has_obj || has_sup)
        throw SchemaError(std::string(op_name(p.op)) +
                          " requires an object and no support");
      return;
  }
}

// ---------------------------------------------------------------------------
// instruction grammar
// ---------------------------------------------------------------------------

namespace grammar {

inline std::vector<std::string> tokenize(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(cur), cur.clear();
    } else {
      cur.push_back(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline bool is_verb(const std::string& w) {
  return w == "put" || w == "place" || w == "open" || w == "close" ||
         w == "turn";
}

// Noun phrase -> entity id: lowercase, hyphens to underscores, articles and
// the filler "and" dropped ("yellow and white mug" == "yellow-white mug").
inline std::string normalize_entity(const std::vector<std::string>& words,
                                    std::size_t begin, std::size_t end) {
  std::string id;
  for (std::size_t i = begin; i < end; ++i) {
    std::string w = words[i];
    if (w == "the" || w == "a" || w == "and") continue;
    std::replace(w.begin(), w.end(), '-', '_');
    if (!id.empty()) id.push_back('_');
    id += w;
  }
  return id;
}

inline std::string raw_phrase(const std::vector<std::string>& words,
                              std::size_t begin, std::size_t end) {
  std::string s;
  for (std::size_t i = begin; i < end; ++i) {
    if (!s.empty()) s.push_back(' ');
    s += words[i];
  }
  return s;
}

}  // namespace grammar

namespace detail {

inline const EntityDef& resolve_entity(const std::vector<std::string>& w,
                                       std::size_t begin, std::size_t end) {
  if (begin >= end)
    throw ParseError("missing entity name in instruction clause");
  const std::string id = grammar::normalize_entity(w, begin, end);
  const EntityDef* def = find_entity(id);
  if (!def)
    throw ParseError("unknown entity \"" + grammar::raw_phrase(w, begin, end) +
                     "\"");
  return *def;
}

inline void require_role(const EntityDef& e, EntityRole role,
                         const char* what) {
  if (e.role != role)
    throw ParseError("entity \"" + e.id + "\" cannot be " + what);
}

// Parses one clause into its primitive expansion.
inline std::vector<Primitive> parse_clause(const std::vector<std::string>& w) {
  if (w.empty()) throw ParseError("empty instruction clause");
  const std::string& verb = w[0];

  if (verb == "open" || verb == "close") {
    const EntityDef& target = resolve_entity(w, 1, w.size());
    require_role(target, EntityRole::kContainer,
                 verb == "open" ? "opened" : "closed");
    return {{verb == "open" ? PrimitiveOp::kOpen : PrimitiveOp::kClose,
             target.id, ""}};
  }

  if (verb == "turn") {
    if (w.size() < 2 || (w[1] != "on" && w[1] != "off"))
      throw ParseError("expected \"on\" or \"off\" after \"turn\"");
    const EntityDef& target = resolve_entity(w, 2, w.size());
    require_role(target, EntityRole::kDevice, "switched");
    return {{w[1] == "on" ? PrimitiveOp::kTurnOn : PrimitiveOp::kTurnOff,
             target.id, ""}};
  }

  if (verb == "put" || verb == "place") {
    // The preposition splits object phrase from target phrase and decides
    // the op: "in" -> place_in, "on" -> place_on, "<rel> of" -> place_rel.
    std::size_t prep = 0;
    std::string kind, rel;
    for (std::size_t i = 2; i + 1 < w.size() && prep == 0; ++i) {
      if (w[i] == "in" || w[i] == "on") {
        prep = i;
        kind = w[i];
      } else if ((w[i] == "left" || w[i] == "right") && i + 2 < w.size() &&
                 w[i + 1] == "of") {
        prep = i;
        kind = "rel";
        rel = w[i] + "_of";
      }
    }
    if (prep == 0)
      throw ParseError("expected \"in\", \"on\", or a relation in a \"" +
                       verb + "\" clause");
    const EntityDef& obj = resolve_entity(w, 1, prep);
    require_role(obj, EntityRole::kObject, "picked");
    const std::size_t target_begin = prep + (kind == "rel" ? 2 : 1);
    const EntityDef& target = resolve_entity(w, target_begin, w.size());
    if (kind == "in") {
      require_role(target, EntityRole::kContainer, "a put-in target");
      return {{PrimitiveOp::kPick, obj.id, ""},
              {PrimitiveOp::kPlaceIn, obj.id, target.id}};
    }
    if (kind == "rel")
      return {{PrimitiveOp::kPick, obj.id, ""},
              {PrimitiveOp::kPlaceRel, obj.id, rel + ":" + target.id}};
    if (target.role != EntityRole::kSupport &&
        target.role != EntityRole::kDevice)
      throw ParseError("entity \"" + target.id + "\" cannot be a support");
    return {{PrimitiveOp::kPick, obj.id, ""},
            {PrimitiveOp::kPlaceOn, obj.id, target.id}};
  }

  throw ParseError("unknown instruction verb \"" + verb + "\"");
}

}  // namespace detail

// Deterministic grammar parser standing in for the frozen plan generator.
// Clauses are joined by "and"; an "and" splits only when a verb follows, so
// entity names containing "and" survive intact.
inline Plan parse_instruction(const std::string& instruction) {
  const auto words = grammar::tokenize(instruction);
  if (words.empty()) throw ParseError("empty instruction");

  std::vector<std::vector<std::string>> clauses(1);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "and" && i + 1 < words.size() &&
        grammar::is_verb(words[i + 1])) {
      clauses.emplace_back();
      continue;
    }
    clauses.back().push_back(words[i]);
  }

  Plan plan;
  for (const auto& clause : clauses) {
    auto prims = detail::parse_clause(clause);
    for (auto& p : prims) plan.primitives.push_back(std::move(p));
  }
  if (plan.length() > kMaxPlanLength) {
    std::ostringstream os;
    os << "plan expands to " << plan.length() << " primitives, limit is "
       << kMaxPlanLength;
    throw ParseError(os.str());
  }
  return plan;
}

// ---------------------------------------------------------------------------
// strict JSON plan contract
// ---------------------------------------------------------------------------
// Top-level array; each element {"op": string, "args": {"object": string,
// "support": string | absent}}. No extra fields, no comments, no trailing
// commas. Serialization is canonical: key order op, args, object, support;
// compact whitespace.

inline std::string plan_to_json(const Plan& plan) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : plan.primitives) {
    nlohmann::ordered_json step;
    step["op"] = op_name(p.op);
    nlohmann::ordered_json args = nlohmann::ordered_json::object();
    if (!p.object.empty()) args["object"] = p.object;
    if (!p.support.empty()) args["support"] = p.support;
    step["args"] = std::move(args);
    arr.push_back(std::move(step));
  }
  return arr.dump();
}

inline Plan plan_from_json(const std::string& text) {
  nlohmann::ordered_json arr;
  try {
    arr = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed JSON: ") + e.what());
  }
  if (!arr.is_array()) throw SchemaError("plan must be a JSON array");
  if (arr.empty()) throw SchemaError("plan must contain at least one step");
  if (arr.size() > static_cast<std::size_t>(kMaxPlanLength))
    throw SchemaError("plan exceeds maximum length " +
                      std::to_string(kMaxPlanLength));

  Plan plan;
  for (const auto& step : arr) {
    if (!step.is_object()) throw SchemaError("plan step must be an object");
    for (const auto& [key, _] : step.items())
      if (key != "op" && key != "args")
        throw SchemaError("unexpected key \"" + key + "\" in plan step");
    if (!step.contains("op") || !step["op"].is_string())
      throw SchemaError("plan step missing string key \"op\"");
    if (!step.contains("args") || !step["args"].is_object())
      throw SchemaError("plan step missing object key \"args\"");

    Primitive p;
    if (!op_from_name(step["op"].get<std::string>(), &p.op))
      throw SchemaError("unknown op \"" + step["op"].get<std::string>() +
                        "\"");
    for (const auto& [key, val] : step["args"].items()) {
      if (key == "object" && val.is_string())
        p.object = val.get<std::string>();
      else if (key == "support" && val.is_string())
        p.support = val.get<std::string>();
      else
        throw SchemaError("unexpected args key \"" + key + "\"");
    }
    check_arity(p);
    plan.primitives.push_back(std::move(p));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// monotone pointer machinery
// ---------------------------------------------------------------------------

// Admissible next indices given the previous pointer: {m_prev, min(m_prev+1, M)}.
inline std::vector<int> admissible_set(int m_prev, int M) {
  if (m_prev < 1 || m_prev > M)
    throw std::out_of_range("admissible_set: pointer " +
                            std::to_string(m_prev) + " outside [1," +
                            std::to_string(M) + "]");
  const int next = std::min(m_prev + 1, M);
  if (next == m_prev) return {m_prev};
  return {m_prev, next};
}

}  // namespace nsgrid
