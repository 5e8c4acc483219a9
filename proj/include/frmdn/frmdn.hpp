#pragma once

#include "frmdn/checkpoint.hpp"
#include "frmdn/cmaes.hpp"
#include "frmdn/config.hpp"
#include "frmdn/control.hpp"
#include "frmdn/data.hpp"
#include "frmdn/distributions.hpp"
#include "frmdn/dream.hpp"
#include "frmdn/error.hpp"
#include "frmdn/flow.hpp"
#include "frmdn/graph.hpp"
#include "frmdn/model.hpp"
#include "frmdn/random.hpp"
#include "frmdn/recurrent.hpp"
#include "frmdn/tensor.hpp"
