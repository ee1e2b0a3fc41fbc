#pragma once

#include <stdexcept>

namespace segedit {

// A model backend (denoiser, language client, embedder) is unavailable or
// misbehaving. The CLI maps this to exit code 2.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace segedit
