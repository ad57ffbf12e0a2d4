#pragma once

// Umbrella header: payload loading, address maps, debug sessions on both
// backends, and the directed / rewriting execution controllers.

#include "addr_map.hpp"
#include "debug_port.hpp"
#include "emu_backend.hpp"
#include "error.hpp"
#include "exec_director.hpp"
#include "memexec.hpp"
#include "native_backend.hpp"
#include "payload_image.hpp"
