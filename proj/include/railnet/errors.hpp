#pragma once

#include <stdexcept>
#include <string>

namespace railnet {

// Problems caused by external input: unreadable or malformed files, bad
// wire frames, infeasible user-supplied configuration. The CLI maps these
// to exit code 2; everything else that escapes maps to 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace railnet
