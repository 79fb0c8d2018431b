#pragma once

#include <string_view>

namespace vdet::log {

enum class Level { kDebug, kInfo, kWarning, kError, kOff };

void set_level(Level level);
Level level();

void debug(std::string_view msg);
void info(std::string_view msg);
void warning(std::string_view msg);
void error(std::string_view msg);

}  // namespace vdet::log
