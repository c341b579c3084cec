// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: 8-byte magic, u64 little-endian header length, a
// JSON header (config, optional adapter config, parameter manifest with
// byte offsets), then raw little-endian f64 blocks in manifest order.
// Round-trips are bit-exact.
#pragma once

#include <string>

#include "esft/model.hpp"

namespace esft {

void save_checkpoint(const MoEModel& model, const std::string& path);
MoEModel load_checkpoint(const std::string& path);

} // namespace esft
