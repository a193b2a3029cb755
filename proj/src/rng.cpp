#include "soiltdm/rng.hpp"

#include <sstream>

#include "soiltdm/errors.hpp"

namespace soiltdm {

std::string Rng::serialize_state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::restore_state(const std::string& text) {
  std::istringstream is(text);
  is >> seed_ >> engine_;
  if (!is) throw ConfigError("bad rng state string");
}

}  // namespace soiltdm
