#pragma once

#include <string>

#include "treeground/params.hpp"

namespace tg {

/// Weight container: magic "ITGW", version u16, u32 parameter count, then per
/// parameter: u32 name length + UTF-8 name, u32 rank, u32 dims, raw 64-bit
/// little-endian floats. Round trips are byte-exact.
void save_checkpoint(const std::string& path, const ParamStore& store);

/// Load into `store`. A non-empty store must already hold every checkpointed
/// name with a matching shape; an empty store is populated from the file.
void load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace tg
