#include "config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>

#include "gsq/error.hpp"
#include "gsq/io.hpp"

namespace gsq::cli {

namespace {

std::string dashed(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return key;
}

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw ConfigError("config key '" + key + "': " + why);
}

}  // namespace

Json coerce(const std::string& key, const Json& value, const Json& prototype) {
  switch (prototype.type()) {
    case Json::value_t::boolean:
      if (!value.is_boolean()) bad(key, "expected true or false");
      return value;
    case Json::value_t::number_unsigned:
      if (!value.is_number_integer() || (value.is_number_integer() && value.get<std::int64_t>() < 0 &&
                                         !value.is_number_unsigned()))
        bad(key, "expected a non-negative integer");
      return value.get<std::uint64_t>();
    case Json::value_t::number_integer:
      if (!value.is_number_integer()) bad(key, "expected an integer");
      return value;
    case Json::value_t::number_float:
      if (!value.is_number()) bad(key, "expected a number");
      return value.get<double>();
    case Json::value_t::string:
    case Json::value_t::null:
      if (!value.is_string()) bad(key, "expected a string");
      return value;
    case Json::value_t::array: {
      if (!value.is_array()) bad(key, "expected an array");
      Json out = Json::array();
      const Json elem = prototype.empty() ? Json("") : prototype.front();
      for (const auto& v : value) out.push_back(coerce(key, v, elem));
      return out;
    }
    default:
      bad(key, "unsupported type");
  }
}

Json coerce_text(const std::string& key, const std::string& text, const Json& prototype) {
  switch (prototype.type()) {
    case Json::value_t::boolean:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      bad(key, "expected true or false, got '" + text + "'");
    case Json::value_t::number_unsigned: {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc{} || p != text.data() + text.size())
        bad(key, "expected a non-negative integer, got '" + text + "'");
      return v;
    }
    case Json::value_t::number_integer: {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc{} || p != text.data() + text.size())
        bad(key, "expected an integer, got '" + text + "'");
      return v;
    }
    case Json::value_t::number_float: {
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (text.empty() || end != text.c_str() + text.size()) bad(key, "expected a number, got '" + text + "'");
      return v;
    }
    case Json::value_t::string:
    case Json::value_t::null:
      return text;
    case Json::value_t::array: {
      Json out = Json::array();
      const Json elem = prototype.empty() ? Json("") : prototype.front();
      std::size_t start = 0;
      while (!text.empty() && start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto end = comma == std::string::npos ? text.size() : comma;
        out.push_back(coerce_text(key, text.substr(start, end - start), elem));
        start = end + 1;
      }
      return out;
    }
    default:
      bad(key, "unsupported type");
  }
}

CommandConfig::CommandConfig(Json defaults) : defaults_(std::move(defaults)) {}

void CommandConfig::bind(CLI::App& app) {
  app.add_option("--config", config_path_, "JSON config file; flags override its values");
  for (const auto& [key, proto] : defaults_.items()) {
    std::string desc = "default: " + (proto.is_string() ? proto.get<std::string>() : proto.dump());
    flag_opts_[key] = app.add_option("--" + dashed(key), flag_text_[key], desc);
  }
}

Json CommandConfig::resolve() const {
  Json cfg = defaults_;
  if (!config_path_.empty()) {
    std::vector<std::uint8_t> bytes;
    try {
      bytes = io::read_file(config_path_);
    } catch (const Error& e) {
      throw ConfigError(std::string("config file: ") + e.what());
    }
    Json file;
    try {
      file = Json::parse(bytes.begin(), bytes.end());
    } catch (const Json::parse_error& e) {
      throw ConfigError("config file '" + config_path_ + "': invalid JSON at byte " +
                        std::to_string(e.byte));
    }
    if (!file.is_object()) throw ConfigError("config file '" + config_path_ + "': expected an object");
    for (const auto& [key, value] : file.items()) {
      if (!defaults_.contains(key)) throw ConfigError("config file: unknown key '" + key + "'");
      cfg[key] = coerce(key, value, defaults_[key]);
    }
  }
  for (const auto& [key, opt] : flag_opts_)
    if (opt->count() > 0) cfg[key] = coerce_text(key, flag_text_.at(key), defaults_[key]);
  return cfg;
}

}  // namespace gsq::cli
