#pragma once

#include "htmtree/abtree.hpp"
#include "htmtree/bench.hpp"
#include "htmtree/bst.hpp"
#include "htmtree/checker.hpp"
#include "htmtree/llxscx.hpp"
#include "htmtree/path_policy.hpp"
#include "htmtree/reclamation.hpp"
#include "htmtree/thread_registry.hpp"
#include "htmtree/txn.hpp"
#include "htmtree/types.hpp"
