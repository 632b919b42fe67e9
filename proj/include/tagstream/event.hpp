#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace tagstream {

enum class Kind { Process, File, Registry, Socket, Pipe, Other };

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Process: return "process";
    case Kind::File: return "file";
    case Kind::Registry: return "registry";
    case Kind::Socket: return "socket";
    case Kind::Pipe: return "pipe";
    case Kind::Other: return "other";
  }
  return "other";
}

/// Unknown kind strings map to Kind::Other; `known` reports whether the
/// input was a member of the closed set.
inline Kind kind_from_string(std::string_view s, bool* known = nullptr) {
  if (known) *known = true;
  if (s == "process") return Kind::Process;
  if (s == "file") return Kind::File;
  if (s == "registry") return Kind::Registry;
  if (s == "socket") return Kind::Socket;
  if (s == "pipe") return Kind::Pipe;
  if (s == "other") return Kind::Other;
  if (known) *known = false;
  return Kind::Other;
}

enum class Op {
  Fork,
  Exec,
  Read,
  Write,
  Create,
  Delete,
  Rename,
  Connect,
  Send,
  Recv,
  ModifyRegistry,
  Load,
};

inline constexpr int kOpCount = 12;

inline std::string_view to_string(Op op) {
  switch (op) {
    case Op::Fork: return "fork";
    case Op::Exec: return "exec";
    case Op::Read: return "read";
    case Op::Write: return "write";
    case Op::Create: return "create";
    case Op::Delete: return "delete";
    case Op::Rename: return "rename";
    case Op::Connect: return "connect";
    case Op::Send: return "send";
    case Op::Recv: return "recv";
    case Op::ModifyRegistry: return "modify_registry";
    case Op::Load: return "load";
  }
  return "?";
}

inline std::optional<Op> op_from_string(std::string_view s) {
  if (s == "fork") return Op::Fork;
  if (s == "exec") return Op::Exec;
  if (s == "read") return Op::Read;
  if (s == "write") return Op::Write;
  if (s == "create") return Op::Create;
  if (s == "delete") return Op::Delete;
  if (s == "rename") return Op::Rename;
  if (s == "connect") return Op::Connect;
  if (s == "send") return Op::Send;
  if (s == "recv") return Op::Recv;
  if (s == "modify_registry") return Op::ModifyRegistry;
  if (s == "load") return Op::Load;
  return std::nullopt;
}

/// A system entity (process, file, registry key, socket, ...). Attributes
/// are kept as a small ordered list; "name" is mandatory, "path", "cmdline"
/// and "addr" are optional. Identity is the canonical `id` computed by
/// entity_key().
struct Entity {
  std::string id;
  Kind kind = Kind::Other;
  std::string host;
  std::vector<std::pair<std::string, std::string>> attrs;

  const std::string* attr(std::string_view key) const {
    for (const auto& [k, v] : attrs)
      if (k == key) return &v;
    return nullptr;
  }

  std::string_view name() const {
    const std::string* n = attr("name");
    return n ? std::string_view(*n) : std::string_view();
  }

  /// Most specific human-readable label: path, then addr, then name.
  const std::string& display() const {
    static const std::string empty;
    if (const std::string* p = attr("path")) return *p;
    if (const std::string* a = attr("addr")) return *a;
    if (const std::string* n = attr("name")) return *n;
    return empty;
  }

  bool operator==(const Entity& o) const {
    return id == o.id && kind == o.kind && host == o.host && attrs == o.attrs;
  }
};

/// Normalized audit event: subject --op--> object at event time `ts`
/// (milliseconds). `seq` is assigned by the source in consumption order.
struct Event {
  std::uint64_t seq = 0;
  std::int64_t ts = 0;
  Entity subject;
  Op op = Op::Read;
  Entity object;

  bool operator==(const Event& o) const {
    return seq == o.seq && ts == o.ts && op == o.op && subject == o.subject &&
           object == o.object;
  }
};

namespace detail {
inline void append_part(std::string& out, std::string_view part) {
  // Length-prefixed so distinct attribute tuples can never collide.
  out += std::to_string(part.size());
  out += ':';
  out.append(part.data(), part.size());
}
}  // namespace detail

/// Canonical entity identity. Deterministic in (host, kind, name, path|addr);
/// path disambiguates same-named files, addr same-named sockets. Throws
/// std::invalid_argument when "name" is absent.
inline std::string entity_key(
    std::string_view host, Kind kind,
    const std::vector<std::pair<std::string, std::string>>& attrs) {
  const std::string* name = nullptr;
  const std::string* path = nullptr;
  const std::string* addr = nullptr;
  for (const auto& [k, v] : attrs) {
    if (k == "name") name = &v;
    else if (k == "path") path = &v;
    else if (k == "addr") addr = &v;
  }
  if (!name) throw std::invalid_argument("entity_key: missing \"name\"");
  std::string out;
  out.reserve(host.size() + name->size() + 24 +
              (path ? path->size() : (addr ? addr->size() : 0)));
  detail::append_part(out, host);
  out += static_cast<char>('0' + static_cast<int>(kind));
  detail::append_part(out, *name);
  if (path) {
    out += 'p';
    detail::append_part(out, *path);
  } else if (addr) {
    out += 'a';
    detail::append_part(out, *addr);
  }
  return out;
}

enum class ParseErrorCode {
  None,
  MalformedDocument,
  MissingField,
  UnknownOp,
  BadTimestamp,
};

inline std::string_view to_string(ParseErrorCode c) {
  switch (c) {
    case ParseErrorCode::None: return "none";
    case ParseErrorCode::MalformedDocument: return "malformed_document";
    case ParseErrorCode::MissingField: return "missing_field";
    case ParseErrorCode::UnknownOp: return "unknown_op";
    case ParseErrorCode::BadTimestamp: return "bad_timestamp";
  }
  return "?";
}

/// Outcome of parsing one NDJSON record: either an Event (possibly with
/// warnings, e.g. an unknown kind coerced to "other") or exactly one error.
struct ParseResult {
  std::optional<Event> event;
  ParseErrorCode error = ParseErrorCode::None;
  std::string detail;
  std::vector<std::string> warnings;

  bool ok() const { return event.has_value(); }
};

struct ParseOptions {
  // When set, records without "ts" get a monotone counter (the seq number)
  // instead of failing; sources for timestamp-less logs enable this and
  // decay degrades to round-based only.
  bool synthesize_ts = false;
};

namespace detail {

inline bool parse_entity(const nlohmann::json& j, const char* field,
                         const std::string& host, Entity& out,
                         ParseResult& res) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_object()) {
    res.error = ParseErrorCode::MissingField;
    res.detail = field;
    return false;
  }
  const nlohmann::json& e = *it;
  auto kind_it = e.find("kind");
  if (kind_it == e.end() || !kind_it->is_string()) {
    res.error = ParseErrorCode::MissingField;
    res.detail = std::string(field) + ".kind";
    return false;
  }
  bool known = false;
  out.kind = kind_from_string(kind_it->get_ref<const std::string&>(), &known);
  if (!known) {
    res.warnings.push_back("unknown_kind_coerced: " + std::string(field) +
                           " kind \"" + kind_it->get<std::string>() + "\"");
  }
  auto name_it = e.find("name");
  if (name_it == e.end() || !name_it->is_string()) {
    res.error = ParseErrorCode::MissingField;
    res.detail = std::string(field) + ".name";
    return false;
  }
  out.host = host;
  out.attrs.emplace_back("name", name_it->get<std::string>());
  for (const char* opt : {"path", "cmdline", "addr"}) {
    auto oit = e.find(opt);
    if (oit != e.end() && oit->is_string())
      out.attrs.emplace_back(opt, oit->get<std::string>());
  }
  out.id = entity_key(out.host, out.kind, out.attrs);
  return true;
}

}  // namespace detail

/// Parse one line of the NDJSON event format. Total: every line yields
/// either one Event or one ParseError, never both, never neither.
/// Comment lines (leading '#') are the caller's concern; fed here they
/// come back as malformed documents.
inline ParseResult parse_event_line(std::string_view line,
                                    std::uint64_t seq = 0,
                                    const ParseOptions& opts = {}) {
  ParseResult res;
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    res.error = ParseErrorCode::MalformedDocument;
    return res;
  }

  Event ev;
  ev.seq = seq;

  auto ts_it = j.find("ts");
  if (ts_it == j.end()) {
    if (opts.synthesize_ts) {
      ev.ts = static_cast<std::int64_t>(seq);
    } else {
      res.error = ParseErrorCode::MissingField;
      res.detail = "ts";
      return res;
    }
  } else if (!ts_it->is_number_integer() && !ts_it->is_number_unsigned()) {
    res.error = ParseErrorCode::BadTimestamp;
    res.detail = "ts must be integer milliseconds";
    return res;
  } else {
    ev.ts = ts_it->get<std::int64_t>();
    if (ev.ts < 0) {
      res.error = ParseErrorCode::BadTimestamp;
      res.detail = "ts must be >= 0";
      return res;
    }
  }

  std::string host = "h0";
  auto host_it = j.find("host");
  if (host_it != j.end()) {
    if (!host_it->is_string()) {
      res.error = ParseErrorCode::MalformedDocument;
      res.detail = "host must be a string";
      return res;
    }
    host = host_it->get<std::string>();
  }

  auto op_it = j.find("op");
  if (op_it == j.end() || !op_it->is_string()) {
    res.error = ParseErrorCode::MissingField;
    res.detail = "op";
    return res;
  }
  // Closed vocabulary: unknown verbs are rejected, not coerced.
  std::optional<Op> op = op_from_string(op_it->get_ref<const std::string&>());
  if (!op) {
    res.error = ParseErrorCode::UnknownOp;
    res.detail = op_it->get<std::string>();
    return res;
  }
  ev.op = *op;

  if (!detail::parse_entity(j, "subj", host, ev.subject, res)) return res;
  if (!detail::parse_entity(j, "obj", host, ev.object, res)) return res;

  res.event = std::move(ev);
  return res;
}

namespace detail {
inline void append_json_string(std::string& out, std::string_view s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  out += '"';
}

inline void append_entity_json(std::string& out, const Entity& e) {
  out += "{\"kind\":\"";
  out += to_string(e.kind);
  out += '"';
  for (const char* key : {"name", "path", "cmdline", "addr"}) {
    if (const std::string* v = e.attr(key)) {
      out += ",\"";
      out += key;
      out += "\":";
      append_json_string(out, *v);
    }
  }
  out += '}';
}
}  // namespace detail

/// Serialize to one NDJSON line (no trailing newline). Inverse of
/// parse_event_line up to the seq number, which is not on the wire.
inline std::string serialize_event(const Event& ev) {
  std::string out;
  out.reserve(128);
  out += "{\"ts\":";
  out += std::to_string(ev.ts);
  out += ",\"host\":";
  detail::append_json_string(out, ev.subject.host);
  out += ",\"subj\":";
  detail::append_entity_json(out, ev.subject);
  out += ",\"op\":\"";
  out += to_string(ev.op);
  out += "\",\"obj\":";
  detail::append_entity_json(out, ev.object);
  out += '}';
  return out;
}

}  // namespace tagstream
