#pragma once

#include "metarhc/common.hpp"
#include "metarhc/linsys.hpp"
#include "metarhc/cost.hpp"
#include "metarhc/qp.hpp"
#include "metarhc/mpc.hpp"
#include "metarhc/inner.hpp"
#include "metarhc/excite.hpp"
#include "metarhc/outer.hpp"
#include "metarhc/policy.hpp"
#include "metarhc/config.hpp"
#include "metarhc/harness.hpp"
