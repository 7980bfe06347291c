#pragma once

#include "core.hpp"
#include "serialize.hpp"
#include "channel.hpp"
#include "sim.hpp"
#include "process.hpp"
#include "payload.hpp"
#include "script.hpp"
#include "lrm.hpp"
#include "scheduler.hpp"
#include "pilot.hpp"
#include "dataflow.hpp"
#include "platform.hpp"
